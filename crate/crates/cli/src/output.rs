//! Output tables and the run directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::config::OutputFormat;
use crate::error::{CliError, Result};

/// A table of preformatted cells. Reals should go through [`num`].
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Extra `# ...` lines written after the hash line.
    pub notes: Vec<String>,
}

/// Shortest decimal representation that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    x.to_string()
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map_or_else(String::new, num)
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Table {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
            notes: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self, format: OutputFormat, config_hash: &str) -> String {
        let mut out = format!("# config_sha256={config_hash}\n");
        for n in &self.notes {
            out.push_str(&format!("# {n}\n"));
        }
        match format {
            OutputFormat::Csv => {
                for r in std::iter::once(&self.header).chain(&self.rows) {
                    let cells: Vec<String> = r.iter().map(|c| csv_cell(c)).collect();
                    out.push_str(&cells.join(","));
                    out.push('\n');
                }
            }
            OutputFormat::Text => {
                let mut widths: Vec<usize> = self.header.iter().map(String::len).collect();
                for r in &self.rows {
                    for (w, c) in widths.iter_mut().zip(r) {
                        *w = (*w).max(c.len());
                    }
                }
                let line = |cells: &[String]| {
                    let padded: Vec<String> = cells
                        .iter()
                        .zip(&widths)
                        .map(|(c, w)| format!("{c:<w$}"))
                        .collect();
                    padded.join("  ").trim_end().to_string() + "\n"
                };
                out.push_str(&line(&self.header));
                for r in &self.rows {
                    out.push_str(&line(r));
                }
            }
        }
        out
    }
}

fn csv_cell(c: &str) -> String {
    if c.contains([',', '"', '\n']) {
        format!("\"{}\"", c.replace('"', "\"\""))
    } else {
        c.to_string()
    }
}

pub fn extension(format: OutputFormat) -> &'static str {
    match format {
        OutputFormat::Csv => "csv",
        OutputFormat::Text => "txt",
    }
}

/// Output directory for one run. Files created through it are deleted again
/// when it is dropped without [`OutputDir::commit`].
pub struct OutputDir {
    root: PathBuf,
    created_root: bool,
    created: Vec<PathBuf>,
    committed: bool,
    format: OutputFormat,
    hash: String,
}

impl OutputDir {
    pub fn create(root: &Path, format: OutputFormat, hash: String) -> Result<Self> {
        let created_root = !root.exists();
        fs::create_dir_all(root).map_err(|e| CliError::io(root, e))?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            created_root,
            created: Vec::new(),
            committed: false,
            format,
            hash,
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    /// Path of `name` inside the directory, registered for cleanup.
    pub fn claim(&mut self, name: &str) -> PathBuf {
        let p = self.root.join(name);
        if !self.created.contains(&p) {
            self.created.push(p.clone());
        }
        p
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<PathBuf> {
        let p = self.claim(name);
        let mut f = fs::File::create(&p).map_err(|e| CliError::io(&p, e))?;
        f.write_all(contents.as_bytes()).map_err(|e| CliError::io(&p, e))?;
        Ok(p)
    }

    /// Writes `stem.csv` or `stem.txt` depending on the configured format.
    pub fn write_table(&mut self, stem: &str, table: &Table) -> Result<PathBuf> {
        let text = table.render(self.format, &self.hash);
        self.write(&format!("{stem}.{}", extension(self.format)), &text)
    }

    pub fn commit(mut self) {
        self.committed = true;
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for p in &self.created {
            let _ = fs::remove_file(p);
        }
        if self.created_root {
            let _ = fs::remove_dir(&self.root);
        }
    }
}
