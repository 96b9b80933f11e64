//! Prediction instances and their line-delimited serialization.
//!
//! A scene file starts with a header record
//! `{"format":"trajdiff.scenes","version":1}` followed by one JSON [`Scene`]
//! per line. Fields: `id`, `dt` (seconds), `focal` (index into `agents`),
//! `agents` (`agent_id`, `past`, `future` as `[x, y]` pairs in meters),
//! optional `lanes` (feature vectors) and optional `label` (generator mode
//! of the focal agent with the noiseless endpoint of every mode).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::geometry::{AgentTrack, Point};

pub const SCENE_FORMAT: &str = "trajdiff.scenes";
pub const SCENE_VERSION: u64 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Straight,
    Left,
    Right,
    Stop,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Straight, Mode::Left, Mode::Right, Mode::Stop];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeLabel {
    pub mode: Mode,
    /// Noiseless final position the focal agent would reach under each mode.
    pub endpoints: Vec<(Mode, Point)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub dt: f64,
    pub focal: usize,
    pub agents: Vec<AgentTrack>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lanes: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<ModeLabel>,
}

impl Scene {
    pub fn focal_track(&self) -> &AgentTrack {
        &self.agents[self.focal]
    }

    /// Checks horizons and indices against `t_p`/`t_f`.
    pub fn validate(&self, t_p: usize, t_f: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Data(format!("scene {}: {msg}", self.id)));
        if self.agents.is_empty() {
            return bad("no agents".into());
        }
        if self.focal >= self.agents.len() {
            return bad(format!("focal index {} out of range", self.focal));
        }
        for a in &self.agents {
            a.validate()?;
            if a.past.len() != t_p {
                return bad(format!("agent {} has {} past steps, expected {t_p}", a.agent_id, a.past.len()));
            }
            if !a.future.is_empty() && a.future.len() != t_f {
                return bad(format!("agent {} has {} future steps, expected {t_f}", a.agent_id, a.future.len()));
            }
        }
        if let Some(lanes) = &self.lanes {
            let w = lanes.first().map_or(0, Vec::len);
            if lanes.is_empty() || w == 0 || lanes.iter().any(|l| l.len() != w || l.iter().any(|v| !v.is_finite())) {
                return bad("lane features must be non-empty, finite and of equal width".into());
            }
        }
        Ok(())
    }

    pub fn endpoint_of(&self, mode: Mode) -> Option<Point> {
        self.label.as_ref()?.endpoints.iter().find(|(m, _)| *m == mode).map(|(_, p)| *p)
    }
}

pub fn write_scenes(path: &Path, scenes: &[Scene]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", json!({"format": SCENE_FORMAT, "version": SCENE_VERSION}))?;
    for s in scenes {
        serde_json::to_writer(&mut w, s).map_err(|e| Error::Data(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scenes(path: &Path) -> Result<Vec<Scene>> {
    let name = path.display().to_string();
    let file = File::open(path).map_err(|e| Error::Data(format!("{name}: {e}")))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: name.clone(),
        line,
        msg,
    };
    let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty scene file".into()))?;
    let header: serde_json::Value = serde_json::from_str(&header?).map_err(|e| parse_err(1, e.to_string()))?;
    if header["format"] != SCENE_FORMAT {
        return Err(parse_err(1, format!("not a {SCENE_FORMAT} file")));
    }
    if header["version"] != SCENE_VERSION {
        return Err(parse_err(1, format!("unsupported version {}", header["version"])));
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| parse_err(i + 1, e.to_string()))?);
    }
    Ok(out)
}
