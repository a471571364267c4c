//! Output files and the run manifest embedded in each of them.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

/// What produced an output, recorded verbatim into every file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub inputs: Vec<String>,
    pub platform: String,
    pub seed: u64,
    pub out_dir: String,
    pub tool_version: String,
}

impl RunManifest {
    pub fn new(command: &str, inputs: Vec<String>, platform: &str, seed: u64, out: &Path) -> Self {
        RunManifest {
            command: command.to_string(),
            inputs,
            platform: platform.to_string(),
            seed,
            out_dir: out.display().to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    fn csv_header(&self) -> String {
        let json = serde_json::to_string(self).expect("manifest serializes");
        format!("# manifest: {json}\n")
    }
}

pub struct OutDir {
    dir: PathBuf,
    manifest: RunManifest,
    written: Vec<PathBuf>,
}

impl OutDir {
    pub fn create(dir: &Path, manifest: RunManifest) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(OutDir {
            dir: dir.to_path_buf(),
            manifest,
            written: Vec::new(),
        })
    }

    /// Writes CSV text with the manifest as a leading `#` comment line.
    pub fn csv(&mut self, name: &str, body: &str) -> Result<()> {
        let text = self.manifest.csv_header() + body;
        self.write(name, &text)
    }

    /// Writes a JSON object with a `manifest` member added.
    pub fn json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        let mut v = serde_json::to_value(value)?;
        match &mut v {
            Value::Object(map) => {
                map.insert("manifest".into(), serde_json::to_value(&self.manifest)?);
            }
            other => {
                v = serde_json::json!({ "manifest": self.manifest, "data": other.take() });
            }
        }
        self.write(name, &(serde_json::to_string_pretty(&v)? + "\n"))
    }

    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        self.written.push(path);
        Ok(())
    }

    pub fn report(&self) {
        for p in &self.written {
            println!("wrote {}", p.display());
        }
    }
}

/// Fixed-width text table.
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<String>) {
        self.rows.push(cells);
    }

    pub fn print(&self) {
        let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.len());
            }
        }
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        println!("{}", line(&self.header).trim_end());
        for r in &self.rows {
            println!("{}", line(r).trim_end());
        }
    }
}

/// Parses `a,b,c-d` style lists into ascending, deduplicated counts.
pub fn parse_counts(items: &[String]) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in items {
        let item = item.trim();
        if let Some((a, b)) = item.split_once('-') {
            let (a, b): (usize, usize) = (
                a.trim().parse().with_context(|| format!("bad count range `{item}`"))?,
                b.trim().parse().with_context(|| format!("bad count range `{item}`"))?,
            );
            anyhow::ensure!(a <= b, "empty count range `{item}`");
            out.extend(a..=b);
        } else {
            out.push(item.parse().with_context(|| format!("bad count `{item}`"))?);
        }
    }
    anyhow::ensure!(out.iter().all(|&c| c > 0), "expert counts must be positive");
    out.sort_unstable();
    out.dedup();
    anyhow::ensure!(!out.is_empty(), "no expert counts given");
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_parse_ranges_and_lists() {
        let v = parse_counts(&["5".into(), "1-3".into(), "3".into()]).unwrap();
        assert_eq!(v, vec![1, 2, 3, 5]);
        assert!(parse_counts(&["3-1".into()]).is_err());
        assert!(parse_counts(&["x".into()]).is_err());
        assert!(parse_counts(&["0".into()]).is_err());
    }
}
