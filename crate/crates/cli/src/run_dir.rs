use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde_json::{json, Value};

/// Output directory of a run: config snapshots, checkpoints, reports and
/// `logs/<command>.jsonl`.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root.join("logs")).with_context(|| format!("creating {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn write(&self, name: &str, text: &str) -> Result<PathBuf> {
        let p = self.path(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        Ok(p)
    }

    pub fn log(&self, command: &str, quiet: bool) -> Result<Log> {
        let p = self.root.join("logs").join(format!("{command}.jsonl"));
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .with_context(|| format!("opening {}", p.display()))?;
        Ok(Log {
            out: BufWriter::new(file),
            command: command.to_string(),
            quiet,
        })
    }
}

/// Structured JSONL records plus optional progress lines on stderr.
pub struct Log {
    out: BufWriter<File>,
    command: String,
    quiet: bool,
}

impl Log {
    pub fn event(&mut self, event: &str, mut fields: Value) -> Result<()> {
        let ts = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0.0, |d| d.as_secs_f64());
        let mut rec = json!({"ts": ts, "command": self.command, "event": event});
        if let (Some(r), Some(f)) = (rec.as_object_mut(), fields.as_object_mut()) {
            r.append(f);
        }
        writeln!(self.out, "{rec}")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("[{}] {}", self.command, msg.as_ref());
        }
    }
}
