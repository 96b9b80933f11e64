//! Inference (encode, sample, score, select) and evaluation against ground truth.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use trajdiff_tensor::Array;

use super::features::{derive_seed, flatten, EncoderGroup, SceneInputs};
use crate::data::Scene;
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::geometry::{cumulative, decode_future, Point};
use crate::metrics::{aggregate, evaluate_set, EvalReport, SceneRecord};
use crate::networks::Model;
use crate::selection::{greedy_coverage_select, nms_select, random_select, PredictionSet, SelectMethod, SelectionConfig};

const RANDOM_SALT: u64 = 0x7A2D_51C3;
pub const PREDICTIONS_FORMAT: &str = "trajdiff.predictions";

#[derive(Clone, Debug)]
pub struct PredictOptions {
    /// `seed` is the base from which per-scene seeds are derived.
    pub sampler: SamplerConfig,
    pub selection: SelectionConfig,
    pub methods: Vec<SelectMethod>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub encode_ms: f64,
    pub sample_ms: f64,
    /// Scoring plus selection; scoring is charged to NMS only.
    pub select_ms: f64,
    /// Sampling plus scoring and selection.
    pub latency_ms: f64,
}

/// K world-frame trajectories for the focal agent of one scene.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub scene_id: String,
    pub agent_id: i64,
    pub method: String,
    pub trajectories: Vec<Vec<Point>>,
    pub indices: Vec<usize>,
    pub scores: Vec<f64>,
    pub fills: usize,
    pub failed_samples: usize,
    pub timing: Timing,
}

/// Candidates of one scene before selection.
#[derive(Clone, Debug)]
pub struct Candidates {
    /// Invariant displacements as sampled.
    pub displacements: Vec<Vec<Point>>,
    /// Agent-frame positions.
    pub relative: Vec<Vec<Point>>,
    pub context: Vec<f64>,
    pub failed: usize,
    pub encode_ms: f64,
    pub sample_ms: f64,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

/// Encodes the scene and draws the focal agent's candidates.
pub fn candidates(
    model: &Model,
    scene: &Scene,
    sampler: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<Candidates> {
    let arch = &model.arch;
    let clock = Instant::now();
    let inputs = SceneInputs::new(scene, arch)?;
    let group = EncoderGroup::stack(&[&inputs], arch)?;
    let ctx = model.encode(&group.hist, group.lanes.as_ref())?;
    let context = ctx.data()[scene.focal * arch.d_c..(scene.focal + 1) * arch.d_c].to_vec();
    let encode_ms = ms(clock);
    let clock = Instant::now();
    let out = sample(&model.predictor(&context)?, arch.t_f, sampler, schedule)?;
    let relative = out.samples.iter().map(|y| cumulative(y)).collect();
    Ok(Candidates {
        displacements: out.samples,
        relative,
        context,
        failed: out.failed.len(),
        encode_ms,
        sample_ms: ms(clock),
    })
}

/// Raw scorer output for one candidate set.
pub fn score_candidates(model: &Model, c: &Candidates) -> Result<Vec<f64>> {
    let m = c.relative.len();
    let cands = Array::new(vec![1, m, 2 * model.arch.t_f], flatten(&c.relative))?;
    let ctx = Array::new(vec![1, model.arch.d_c], c.context.clone())?;
    Ok(model.score(&cands, &ctx)?.into_vec())
}

/// Applies one selection method; `scores` is required for NMS.
pub fn select(
    method: SelectMethod,
    cands: &[Vec<Point>],
    scores: Option<&[f64]>,
    cfg: &SelectionConfig,
    random_seed: u64,
) -> Result<PredictionSet> {
    match method {
        SelectMethod::Nms => {
            let s = scores.ok_or_else(|| Error::Invalid("NMS selection needs candidate scores".into()))?;
            nms_select(cands, s, cfg)
        }
        SelectMethod::Coverage => greedy_coverage_select(cands, cfg),
        SelectMethod::Random => random_select(cands.len(), cfg.k, random_seed),
    }
}

/// All requested methods on one scene, sharing a single candidate draw.
pub fn predict_scene(
    model: &Model,
    scene: &Scene,
    index: usize,
    opts: &PredictOptions,
    schedule: &NoiseSchedule,
) -> Result<Vec<Prediction>> {
    let sampler = SamplerConfig {
        seed: derive_seed(opts.sampler.seed, index as u64),
        ..opts.sampler
    };
    let c = candidates(model, scene, &sampler, schedule)?;
    if c.relative.len() < opts.selection.k {
        return Err(Error::Numeric(format!(
            "scene {}: only {} of {} samples finished, fewer than K = {}",
            scene.id,
            c.relative.len(),
            sampler.samples,
            opts.selection.k
        )));
    }
    let track = scene.focal_track();
    let hist = crate::geometry::to_invariant_history(track)?;
    let clock = Instant::now();
    let scores = if opts.methods.contains(&SelectMethod::Nms) {
        Some(score_candidates(model, &c)?)
    } else {
        None
    };
    let score_ms = ms(clock);
    let random_seed = derive_seed(opts.sampler.seed ^ RANDOM_SALT, index as u64);
    let mut out = Vec::with_capacity(opts.methods.len());
    for &method in &opts.methods {
        let clock = Instant::now();
        let set = select(method, &c.relative, scores.as_deref(), &opts.selection, random_seed)?;
        let select_ms = ms(clock) + if method == SelectMethod::Nms { score_ms } else { 0.0 };
        let trajectories = set
            .indices
            .iter()
            .map(|&i| decode_future(&c.displacements[i], model.arch.t_f, &hist.rotation, hist.anchor))
            .collect::<Result<Vec<_>>>()?;
        if trajectories.iter().flatten().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("scene {}: non-finite prediction", scene.id)));
        }
        out.push(Prediction {
            scene_id: scene.id.clone(),
            agent_id: track.agent_id,
            method: method.name().to_string(),
            trajectories,
            indices: set.indices,
            scores: set.scores,
            fills: set.fills,
            failed_samples: c.failed,
            timing: Timing {
                encode_ms: c.encode_ms,
                sample_ms: c.sample_ms,
                select_ms,
                latency_ms: c.sample_ms + select_ms,
            },
        });
    }
    Ok(out)
}

/// Scene-parallel prediction; output follows scene order, then method order.
pub fn predict(model: &Model, scenes: &[Scene], opts: &PredictOptions, schedule: &NoiseSchedule) -> Result<Vec<Prediction>> {
    opts.selection.validate()?;
    opts.sampler.validate(schedule)?;
    if opts.methods.is_empty() {
        return Err(Error::Config("no selection method requested".into()));
    }
    let per: Vec<Vec<Prediction>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, s)| predict_scene(model, s, i, opts, schedule))
        .collect::<Result<_>>()?;
    Ok(per.into_iter().flatten().collect())
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "{}", serde_json::json!({"format": PREDICTIONS_FORMAT, "version": 1}))?;
    for p in preds {
        serde_json::to_writer(&mut w, p).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let r = BufReader::new(std::fs::File::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        let err = |msg: String| Error::Parse {
            path: path.display().to_string(),
            line: n + 1,
            msg,
        };
        if n == 0 {
            let h: serde_json::Value = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            if h.get("format").and_then(|v| v.as_str()) != Some(PREDICTIONS_FORMAT) {
                return Err(err("not a predictions file".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| err(e.to_string()))?);
    }
    Ok(out)
}

/// Method order for reports: the fixed baseline order first, then others
/// in order of appearance.
fn method_order(preds: &[Prediction]) -> Vec<String> {
    let mut order: Vec<String> = SelectMethod::ALL
        .iter()
        .map(|m| m.name().to_string())
        .filter(|m| preds.iter().any(|p| &p.method == m))
        .collect();
    for p in preds {
        if !order.contains(&p.method) {
            order.push(p.method.clone());
        }
    }
    order
}

fn listing(ids: &[String]) -> String {
    const SHOW: usize = 10;
    let mut s = ids.iter().take(SHOW).cloned().collect::<Vec<_>>().join(", ");
    if ids.len() > SHOW {
        s.push_str(&format!(" and {} more", ids.len() - SHOW));
    }
    s
}

/// Scores predictions against the focal futures of `truth`. Every
/// prediction must name a known scene with a future, and every such scene
/// must be predicted by every method present.
pub fn evaluate(
    preds: &[Prediction],
    truth: &[Scene],
    ks: &[usize],
    miss_threshold: f64,
) -> Result<(Vec<EvalReport>, Vec<SceneRecord>)> {
    let gt: HashMap<&str, &Scene> = truth
        .iter()
        .filter(|s| s.focal_track().has_future())
        .map(|s| (s.id.as_str(), s))
        .collect();
    let unknown: Vec<String> = preds
        .iter()
        .filter(|p| !gt.contains_key(p.scene_id.as_str()))
        .map(|p| p.scene_id.clone())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Data(format!(
            "{} predictions have no ground truth: {}",
            unknown.len(),
            listing(&unknown)
        )));
    }
    let mut reports = Vec::new();
    let mut records = Vec::new();
    for method in method_order(preds) {
        let mine: BTreeMap<&str, &Prediction> = preds
            .iter()
            .filter(|p| p.method == method)
            .map(|p| (p.scene_id.as_str(), p))
            .collect();
        let missing: Vec<String> = truth
            .iter()
            .filter(|s| gt.contains_key(s.id.as_str()) && !mine.contains_key(s.id.as_str()))
            .map(|s| s.id.clone())
            .collect();
        if !missing.is_empty() {
            return Err(Error::Data(format!(
                "method {method}: {} scenes lack predictions: {}",
                missing.len(),
                listing(&missing)
            )));
        }
        let mut rows = Vec::with_capacity(gt.len());
        for scene in truth.iter().filter(|s| gt.contains_key(s.id.as_str())) {
            let p = mine[scene.id.as_str()];
            let metrics = evaluate_set(&scene.focal_track().future, &p.trajectories, ks, miss_threshold)?;
            rows.push(SceneRecord {
                scene_id: p.scene_id.clone(),
                agent_id: p.agent_id,
                method: method.clone(),
                metrics,
                latency_ms: Some(p.timing.latency_ms),
                fills: p.fills,
                failed_samples: p.failed_samples,
            });
        }
        reports.push(aggregate(&method, &rows)?);
        records.extend(rows);
    }
    Ok((reports, records))
}
