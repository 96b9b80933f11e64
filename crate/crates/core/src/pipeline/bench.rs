//! Latency and accuracy over a grid of step counts and sample counts.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::features::{derive_seed, EncoderGroup, SceneInputs};
use super::predict::{score_candidates, select, Candidates};
use crate::config::RunConfig;
use crate::data::Scene;
use crate::diffusion::{sample, Method, NoiseSchedule, SamplerConfig};
use crate::error::{Error, Result};
use crate::geometry::{cumulative, decode_future, to_invariant_history, Point, Rotation};
use crate::metrics::{evaluate_set, median, render, KMetrics};
use crate::networks::Model;
use crate::selection::SelectMethod;

/// A scene with its context already encoded; encoding is not timed.
#[derive(Clone, Debug)]
pub struct PreparedScene {
    pub id: String,
    pub context: Vec<f64>,
    pub rotation: Rotation,
    pub anchor: Point,
    pub truth: Option<Vec<Point>>,
}

pub fn prepare_scenes(model: &Model, scenes: &[Scene]) -> Result<Vec<PreparedScene>> {
    let arch = &model.arch;
    scenes
        .iter()
        .map(|scene| {
            let inputs = SceneInputs::new(scene, arch)?;
            let group = EncoderGroup::stack(&[&inputs], arch)?;
            let ctx = model.encode(&group.hist, group.lanes.as_ref())?;
            let track = scene.focal_track();
            let hist = to_invariant_history(track)?;
            Ok(PreparedScene {
                id: scene.id.clone(),
                context: ctx.data()[scene.focal * arch.d_c..(scene.focal + 1) * arch.d_c].to_vec(),
                rotation: hist.rotation,
                anchor: hist.anchor,
                truth: track.has_future().then(|| track.future.clone()),
            })
        })
        .collect()
}

/// Sampler for a step count: the full count is ancestral sampling, any
/// divisor of it is deterministic sampling with the matching skip.
pub fn sampler_for(steps: usize, samples: usize, schedule: &NoiseSchedule) -> Result<SamplerConfig> {
    let h = schedule.steps();
    if steps == 0 || steps > h || h % steps != 0 {
        return Err(Error::Config(format!("{steps} steps does not divide the {h} diffusion steps")));
    }
    let cfg = SamplerConfig {
        method: if steps == h { Method::Ddpm } else { Method::Ddim },
        skip: h / steps,
        samples,
        seed: 0,
    };
    cfg.validate(schedule)?;
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchCell {
    pub steps: usize,
    pub method: Method,
    pub samples: usize,
    pub scenes: usize,
    pub denoiser_calls: usize,
    /// Median over repeats of the scene-mean latency.
    pub latency_ms: f64,
    pub repeat_ms: Vec<f64>,
    pub metrics: Vec<KMetrics>,
    /// Metrics were bit-identical across all repeats.
    pub deterministic: bool,
}

#[derive(Clone, Debug)]
pub struct CellSpec {
    pub steps: usize,
    pub samples: usize,
    pub select: SelectMethod,
    pub warmup: usize,
    pub repeats: usize,
}

struct Pass {
    mean_ms: f64,
    calls: usize,
    metrics: Vec<KMetrics>,
}

fn run_pass(
    model: &Model,
    scenes: &[PreparedScene],
    sampler: &SamplerConfig,
    spec: &CellSpec,
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
) -> Result<Pass> {
    let t_f = model.arch.t_f;
    let mut total_ms = 0.0;
    let mut calls = 0;
    let mut sums: Vec<KMetrics> = Vec::new();
    let mut counted = 0usize;
    for (i, s) in scenes.iter().enumerate() {
        let seed = derive_seed(cfg.seed, i as u64);
        let scfg = SamplerConfig { seed, ..*sampler };
        let clock = Instant::now();
        let out = sample(&model.predictor(&s.context)?, t_f, &scfg, schedule)?;
        let relative: Vec<Vec<Point>> = out.samples.iter().map(|y| cumulative(y)).collect();
        if relative.len() < cfg.selection.k {
            return Err(Error::Numeric(format!("scene {}: too many failed samples", s.id)));
        }
        let c = Candidates {
            displacements: out.samples,
            relative,
            context: s.context.clone(),
            failed: out.failed.len(),
            encode_ms: 0.0,
            sample_ms: 0.0,
        };
        let scores = match spec.select {
            SelectMethod::Nms => Some(score_candidates(model, &c)?),
            _ => None,
        };
        let set = select(spec.select, &c.relative, scores.as_deref(), &cfg.selection, seed)?;
        total_ms += clock.elapsed().as_secs_f64() * 1e3;
        calls += out.denoiser_calls;
        if let Some(truth) = &s.truth {
            let world = set
                .indices
                .iter()
                .map(|&j| decode_future(&c.displacements[j], t_f, &s.rotation, s.anchor))
                .collect::<Result<Vec<_>>>()?;
            let m = evaluate_set(truth, &world, &cfg.eval.k_values, cfg.eval.miss_threshold)?;
            if sums.is_empty() {
                sums = m.iter().map(|x| KMetrics { min_ade: 0.0, min_fde: 0.0, miss: 0.0, ..*x }).collect();
            }
            for (a, b) in sums.iter_mut().zip(&m) {
                a.min_ade += b.min_ade;
                a.min_fde += b.min_fde;
                a.miss += b.miss;
            }
            counted += 1;
        }
    }
    for a in &mut sums {
        let n = counted as f64;
        a.min_ade /= n;
        a.min_fde /= n;
        a.miss /= n;
    }
    Ok(Pass {
        mean_ms: total_ms / scenes.len().max(1) as f64,
        calls,
        metrics: sums,
    })
}

/// Times sampling, scoring and selection for one grid cell. Scenes run one
/// after another on the calling thread.
pub fn measure_cell(
    model: &Model,
    scenes: &[PreparedScene],
    spec: &CellSpec,
    cfg: &RunConfig,
    schedule: &NoiseSchedule,
) -> Result<BenchCell> {
    if scenes.is_empty() || spec.repeats == 0 {
        return Err(Error::Config("benchmark needs at least one scene and one repeat".into()));
    }
    let sampler = sampler_for(spec.steps, spec.samples, schedule)?;
    for _ in 0..spec.warmup {
        run_pass(model, scenes, &sampler, spec, cfg, schedule)?;
    }
    let passes = (0..spec.repeats)
        .map(|_| run_pass(model, scenes, &sampler, spec, cfg, schedule))
        .collect::<Result<Vec<_>>>()?;
    let repeat_ms: Vec<f64> = passes.iter().map(|p| p.mean_ms).collect();
    Ok(BenchCell {
        steps: spec.steps,
        method: sampler.method,
        samples: spec.samples,
        scenes: scenes.len(),
        denoiser_calls: passes[0].calls,
        latency_ms: median(&repeat_ms),
        repeat_ms,
        deterministic: passes.iter().all(|p| p.metrics == passes[0].metrics),
        metrics: passes[0].metrics.clone(),
    })
}

/// Panel A varies the step count at the first sample count; panel B varies
/// the sample count at the last step count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub select: SelectMethod,
    pub steps_panel: Vec<BenchCell>,
    pub samples_panel: Vec<BenchCell>,
}

pub fn run_bench(
    model: &Model,
    scenes: &[Scene],
    cfg: &RunConfig,
    select: SelectMethod,
    on_cell: &mut dyn FnMut(&str, &BenchCell),
) -> Result<BenchReport> {
    cfg.validate_bench()?;
    let schedule = cfg.schedule()?;
    let b = &cfg.bench;
    for &s in &b.steps {
        sampler_for(s, b.samples[0], &schedule)?;
    }
    let take = scenes.len().min(b.max_scenes.max(1));
    let prepared = prepare_scenes(model, &scenes[..take])?;
    let spec = |steps, samples| CellSpec {
        steps,
        samples,
        select,
        warmup: b.warmup,
        repeats: b.repeats,
    };
    let mut steps_panel = Vec::new();
    for &s in &b.steps {
        let cell = measure_cell(model, &prepared, &spec(s, b.samples[0]), cfg, &schedule)?;
        on_cell("steps", &cell);
        steps_panel.push(cell);
    }
    let last = *b.steps.last().expect("validated non-empty");
    let mut samples_panel = Vec::new();
    for &m in &b.samples {
        let cell = measure_cell(model, &prepared, &spec(last, m), cfg, &schedule)?;
        on_cell("samples", &cell);
        samples_panel.push(cell);
    }
    Ok(BenchReport {
        select,
        steps_panel,
        samples_panel,
    })
}

fn panel_rows(title: &str, cells: &[BenchCell], rows: &mut Vec<Vec<String>>) {
    let base = cells.first().map_or(1.0, |c| c.latency_ms);
    for c in cells {
        let mut row = vec![
            title.to_string(),
            c.steps.to_string(),
            format!("{:?}", c.method).to_lowercase(),
            c.samples.to_string(),
        ];
        for m in &c.metrics {
            row.push(format!("{:.3}", m.min_ade));
            row.push(format!("{:.3}", m.min_fde));
        }
        row.push(format!("{:.2}", c.latency_ms));
        row.push(format!("{:.2}", c.latency_ms / base));
        rows.push(row);
    }
}

/// Two-panel plain-text table.
pub fn format_bench(report: &BenchReport) -> String {
    let mut header: Vec<String> = ["panel", "steps", "sampler", "M"].map(String::from).to_vec();
    if let Some(c) = report.steps_panel.first() {
        for m in &c.metrics {
            header.push(format!("minADE_{}", m.k));
            header.push(format!("minFDE_{}", m.k));
        }
    }
    header.push("latency_ms".into());
    header.push("rel".into());
    let mut rows = vec![header];
    panel_rows("steps", &report.steps_panel, &mut rows);
    panel_rows("samples", &report.samples_panel, &mut rows);
    render(&rows)
}
