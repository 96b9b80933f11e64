//! ETH/UCY pedestrian annotation files: whitespace-separated
//! `frame id x y` rows (`frame id y x` with `swap_xy`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use crate::data::scene::Scene;
use crate::error::{Error, Result};
use crate::geometry::{AgentTrack, Point};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawAnnotation {
    pub frame: i64,
    pub agent: i64,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WindowSpec {
    pub t_p: usize,
    pub t_f: usize,
    /// Window start advance, in annotated frames.
    pub stride: usize,
    pub dt: f64,
    pub swap_xy: bool,
}

fn integral(v: &str, what: &str) -> std::result::Result<i64, String> {
    let f: f64 = v.parse().map_err(|_| format!("{what} `{v}` is not a number"))?;
    if f.fract() != 0.0 || !f.is_finite() {
        return Err(format!("{what} `{v}` is not an integer"));
    }
    Ok(f as i64)
}

/// Parses annotation text; `name` is used in error messages.
pub fn parse_annotations(text: &str, name: &str, swap_xy: bool) -> Result<Vec<RawAnnotation>> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: name.to_string(),
            line: i + 1,
            msg,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 4 {
            return Err(err(format!("expected 4 columns, found {}", cols.len())));
        }
        let frame = integral(cols[0], "frame").map_err(err)?;
        let agent = integral(cols[1], "agent id").map_err(err)?;
        let a: f64 = cols[2].parse().map_err(|_| err(format!("coordinate `{}` is not a number", cols[2])))?;
        let b: f64 = cols[3].parse().map_err(|_| err(format!("coordinate `{}` is not a number", cols[3])))?;
        if !a.is_finite() || !b.is_finite() {
            return Err(err("non-finite coordinate".into()));
        }
        if !seen.insert((frame, agent)) {
            return Err(err(format!("duplicate annotation for agent {agent} at frame {frame}")));
        }
        let (x, y) = if swap_xy { (b, a) } else { (a, b) };
        out.push(RawAnnotation { frame, agent, x, y });
    }
    Ok(out)
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

/// Sliding windows over one file. Every agent annotated at all `T_p + T_f`
/// frames of a window is a focal agent of its own scene; neighbours are the
/// other agents annotated at all history frames (their future is kept only
/// when complete).
pub fn windows(rows: &[RawAnnotation], name: &str, spec: &WindowSpec) -> Result<Vec<Scene>> {
    if spec.t_p < 2 || spec.t_f == 0 || spec.stride == 0 {
        return Err(Error::Config("windows need t_p >= 2, t_f >= 1 and stride >= 1".into()));
    }
    let frames: BTreeSet<i64> = rows.iter().map(|r| r.frame).collect();
    let Some(&first) = frames.iter().next() else {
        return Ok(Vec::new());
    };
    let step = frames
        .iter()
        .zip(frames.iter().skip(1))
        .fold(0, |g, (a, b)| gcd(g, b - a))
        .max(1);
    let last = *frames.iter().next_back().unwrap();
    let mut at: BTreeMap<i64, HashMap<i64, Point>> = BTreeMap::new();
    for r in rows {
        at.entry(r.frame).or_default().insert(r.agent, [r.x, r.y]);
    }
    let span = (spec.t_p + spec.t_f) as i64;
    let track = |agent: i64, from: i64, n: usize| -> Option<Vec<Point>> {
        (0..n as i64)
            .map(|k| at.get(&(from + k * step)).and_then(|m| m.get(&agent)).copied())
            .collect()
    };
    let mut scenes = Vec::new();
    let mut start = first;
    while start + (span - 1) * step <= last {
        let observed: BTreeSet<i64> = at
            .get(&start)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default();
        let mut agents = Vec::new();
        for &id in &observed {
            if let Some(past) = track(id, start, spec.t_p) {
                let future = track(id, start + spec.t_p as i64 * step, spec.t_f).unwrap_or_default();
                agents.push(AgentTrack { agent_id: id, past, future });
            }
        }
        for (i, a) in agents.iter().enumerate() {
            if a.has_future() {
                scenes.push(Scene {
                    id: format!("{name}:{start}:{}", a.agent_id),
                    dt: spec.dt,
                    focal: i,
                    agents: agents.clone(),
                    lanes: None,
                    label: None,
                });
            }
        }
        start += spec.stride as i64 * step;
    }
    Ok(scenes)
}

pub fn load_ethucy(path: &Path, spec: &WindowSpec) -> Result<Vec<Scene>> {
    let name = path.file_stem().map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
    let text = std::fs::read_to_string(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let rows = parse_annotations(&text, &path.display().to_string(), spec.swap_xy)?;
    windows(&rows, &name, spec)
}

pub const SUBSETS: [(&str, &[&str]); 5] = [
    ("ETH", &["biwi_eth.txt"]),
    ("Hotel", &["biwi_hotel.txt"]),
    ("Univ", &["students001.txt", "students003.txt"]),
    ("Zara1", &["crowds_zara01.txt"]),
    ("Zara2", &["crowds_zara02.txt"]),
];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<&'static str>,
    pub test: Vec<&'static str>,
}

/// Train on four locations, test on the named one.
pub fn leave_one_out_splits(subset: &str) -> Result<Split> {
    let held = SUBSETS
        .iter()
        .find(|(n, _)| n.eq_ignore_ascii_case(subset))
        .ok_or_else(|| {
            let names: Vec<&str> = SUBSETS.iter().map(|(n, _)| *n).collect();
            Error::Config(format!("unknown subset `{subset}`; valid names: {}", names.join(", ")))
        })?;
    Ok(Split {
        test: held.1.to_vec(),
        train: SUBSETS
            .iter()
            .filter(|(n, _)| *n != held.0)
            .flat_map(|(_, f)| f.iter().copied())
            .collect(),
    })
}

/// Finds each named file somewhere below `root`.
pub fn resolve_files(root: &Path, names: &[&str]) -> Result<Vec<PathBuf>> {
    fn walk(dir: &Path, out: &mut Vec<PathBuf>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let p = entry?.path();
            if p.is_dir() {
                walk(&p, out)?;
            } else {
                out.push(p);
            }
        }
        Ok(())
    }
    let mut all = Vec::new();
    walk(root, &mut all).map_err(|e| Error::Data(format!("{}: {e}", root.display())))?;
    all.sort();
    names
        .iter()
        .map(|n| {
            all.iter()
                .find(|p| p.file_name().is_some_and(|f| f == *n))
                .cloned()
                .ok_or_else(|| Error::Data(format!("{n} not found under {}", root.display())))
        })
        .collect()
}
