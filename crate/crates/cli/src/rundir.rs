use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ividr_core::eval::MetricRow;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::ExperimentConfig;

pub const BUILD_ID: &str = env!("IVIDR_BUILD_ID");

/// Written next to every output so a file can be traced to its run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub build: String,
    pub command: String,
    pub config: ExperimentConfig,
}

impl Provenance {
    /// One-line header for CSV and TSV files.
    pub fn comment_line(&self) -> Result<String> {
        Ok(format!("# build={} command={} config={}\n", self.build, self.command, serde_json::to_string(&self.config)?))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub provenance: Provenance,
    pub cell: String,
    pub ok: bool,
    pub error: Option<String>,
    pub rows: Vec<MetricRow>,
    /// Command-specific extras (fit summary, IV diagnostics).
    pub details: Value,
}

pub struct RunDir {
    pub root: PathBuf,
    pub provenance: Provenance,
}

impl RunDir {
    /// Fresh `<out>/<command>-<timestamp>` directory.
    pub fn create(out: &Path, command: &str, config: ExperimentConfig) -> Result<Self> {
        let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
        let mut root = out.join(format!("{command}-{stamp}"));
        let mut n = 1;
        while root.exists() {
            root = out.join(format!("{command}-{stamp}-{n}"));
            n += 1;
        }
        fs::create_dir_all(root.join("cells")).with_context(|| format!("creating {}", root.display()))?;
        let dir = Self { root, provenance: Provenance { build: BUILD_ID.into(), command: command.into(), config } };
        dir.write_json("run.json", &dir.provenance)?;
        Ok(dir)
    }

    /// Reopen an interrupted run; its stored config wins over the CLI's.
    pub fn resume(root: &Path, command: &str) -> Result<Self> {
        let text = fs::read_to_string(root.join("run.json")).with_context(|| format!("{} is not a run directory", root.display()))?;
        let mut provenance: Provenance = serde_json::from_str(&text)?;
        if provenance.command != command {
            bail!("{} was created by `{}`, not `{command}`", root.display(), provenance.command);
        }
        provenance.build = BUILD_ID.into();
        fs::create_dir_all(root.join("cells"))?;
        Ok(Self { root: root.to_owned(), provenance })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.provenance.config
    }

    fn cell_path(&self, cell: &str) -> PathBuf {
        self.root.join("cells").join(format!("{cell}.json"))
    }

    /// A successfully completed cell from an earlier attempt.
    pub fn completed(&self, cell: &str) -> Option<CellRecord> {
        let text = fs::read_to_string(self.cell_path(cell)).ok()?;
        serde_json::from_str::<CellRecord>(&text).ok().filter(|r| r.ok)
    }

    pub fn record(&self, cell: &str, outcome: Result<(Vec<MetricRow>, Value)>) -> Result<CellRecord> {
        let rec = match outcome {
            Ok((rows, details)) => CellRecord { provenance: self.provenance.clone(), cell: cell.into(), ok: true, error: None, rows, details },
            Err(e) => {
                log::error!("cell {cell} failed: {e:#}");
                CellRecord {
                    provenance: self.provenance.clone(),
                    cell: cell.into(),
                    ok: false,
                    error: Some(format!("{e:#}")),
                    rows: Vec::new(),
                    details: Value::Null,
                }
            }
        };
        // Write-then-rename so an interrupted write never looks complete.
        let path = self.cell_path(cell);
        let tmp = path.with_extension("json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(&rec)?)?;
        fs::rename(&tmp, &path)?;
        Ok(rec)
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
    }

    /// JSON document with provenance attached under `"provenance"`.
    pub fn write_stamped_json(&self, name: &str, body: Value) -> Result<()> {
        let mut doc = serde_json::json!({ "provenance": self.provenance });
        if let Value::Object(m) = body {
            doc.as_object_mut().expect("object").extend(m);
        } else {
            doc["body"] = body;
        }
        self.write_json(name, &doc)
    }

    pub fn write_stamped_text(&self, name: &str, body: &str) -> Result<()> {
        let path = self.root.join(name);
        fs::write(&path, self.provenance.comment_line()? + body).with_context(|| format!("writing {}", path.display()))
    }
}
