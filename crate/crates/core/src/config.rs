//! Run configuration: a TOML document whose every key can be overridden by
//! `section.key=value` assignments.
//!
//! ```toml
//! seed = 0
//! [data]       dt, stride, swap_xy
//! [synthetic]  scenes, agents_per_scene, weights, speed_min, speed_max, noise, turn_angle, neighbor_radius
//! [model]      t_p, t_f, d_model, heads, ffn_mult, dropout, d_c, encoder_layers, lane_dim,
//!              denoiser_layers, scorer_heads, scorer_d_head, scorer_d, scorer_mlp
//! [diffusion]  steps, beta_start, beta_end, method, skip, samples
//! [selection]  k, omega, radius, distance, lambda, temperature
//! [train]      denoiser_epochs, scorer_epochs, batch_size, lr, weight_decay, beta1, beta2, eps
//! [eval]       k_values, miss_threshold
//! [bench]      steps, samples, warmup, repeats, max_scenes
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};
use trajdiff_tensor::AdamW;

use crate::data::{SyntheticParams, SyntheticSpec, WindowSpec};
use crate::diffusion::{Method, NoiseSchedule, SamplerConfig, DEFAULT_BETA_END, DEFAULT_BETA_START, DEFAULT_STEPS};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_MISS_THRESHOLD;
use crate::networks::ArchConfig;
use crate::selection::SelectionConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dt: f64,
    pub stride: usize,
    pub swap_xy: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dt: 0.4,
            stride: 1,
            swap_xy: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub method: Method,
    pub skip: usize,
    /// Candidates drawn per agent (M).
    pub samples: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            steps: DEFAULT_STEPS,
            beta_start: DEFAULT_BETA_START,
            beta_end: DEFAULT_BETA_END,
            method: Method::Ddim,
            skip: 20,
            samples: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub denoiser_epochs: usize,
    pub scorer_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            denoiser_epochs: 80,
            scorer_epochs: 20,
            batch_size: 32,
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_values: Vec<usize>,
    pub miss_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_values: vec![1, 5, 10, 20],
            miss_threshold: DEFAULT_MISS_THRESHOLD,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    /// Denoising step counts; a count equal to the diffusion steps means DDPM.
    pub steps: Vec<usize>,
    pub samples: Vec<usize>,
    pub warmup: usize,
    pub repeats: usize,
    pub max_scenes: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            steps: vec![200, 100, 50, 20, 10],
            samples: vec![20, 50, 100],
            warmup: 2,
            repeats: 5,
            max_scenes: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticParams,
    pub model: ArchConfig,
    pub diffusion: DiffusionConfig,
    pub selection: SelectionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

fn parse_value(raw: &str) -> toml::Value {
    // a bare TOML literal (number, bool, array, quoted string) or else a string
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut cur = table;
    for part in &path[..path.len() - 1] {
        let entry = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    /// Reads an optional TOML file, applies overrides, then validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.selection.validate()?;
        let schedule = self.schedule()?;
        self.sampler(self.seed).validate(&schedule)?;
        if self.diffusion.samples < self.selection.k {
            return Err(Error::Config(format!(
                "diffusion.samples (M = {}) must be at least selection.k (K = {})",
                self.diffusion.samples, self.selection.k
            )));
        }
        if !(self.data.dt > 0.0) || self.data.stride == 0 {
            return Err(Error::Config("data.dt must be positive and data.stride at least 1".into()));
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("train.batch_size and train.lr must be positive".into()));
        }
        if self.eval.k_values.is_empty() || self.eval.k_values.contains(&0) {
            return Err(Error::Config("eval.k_values must be non-empty and positive".into()));
        }
        if let Some(&k) = self.eval.k_values.iter().max() {
            if k > self.selection.k {
                return Err(Error::Config(format!(
                    "eval.k_values contains {k}, larger than selection.k = {}",
                    self.selection.k
                )));
            }
        }
        if !(self.eval.miss_threshold > 0.0) {
            return Err(Error::Config("eval.miss_threshold must be positive".into()));
        }
        self.synthetic_spec().validate()?;
        Ok(())
    }

    /// Checks the benchmark grid against the schedule.
    pub fn validate_bench(&self) -> Result<()> {
        let b = &self.bench;
        if b.steps.is_empty() || b.samples.is_empty() || b.repeats == 0 {
            return Err(Error::Config("bench.steps, bench.samples and bench.repeats must be non-empty".into()));
        }
        let h = self.diffusion.steps;
        for &s in &b.steps {
            if s == 0 || s > h || h % s != 0 {
                return Err(Error::Config(format!(
                    "bench step count {s} does not divide the {h} diffusion steps"
                )));
            }
        }
        if let Some(&m) = b.samples.iter().find(|&&m| m < self.selection.k) {
            return Err(Error::Config(format!("bench sample count {m} is below K = {}", self.selection.k)));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.diffusion.steps, self.diffusion.beta_start, self.diffusion.beta_end)
    }

    pub fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            method: self.diffusion.method,
            skip: self.diffusion.skip,
            samples: self.diffusion.samples,
            seed,
        }
    }

    pub fn window_spec(&self) -> WindowSpec {
        WindowSpec {
            t_p: self.model.t_p,
            t_f: self.model.t_f,
            stride: self.data.stride,
            dt: self.data.dt,
            swap_xy: self.data.swap_xy,
        }
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            params: self.synthetic.clone(),
            seed: self.seed,
            t_p: self.model.t_p,
            t_f: self.model.t_f,
            dt: self.data.dt,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.diffusion.steps, 200);
        assert_eq!(cfg.diffusion.skip, 20);
        assert_eq!(cfg.train.batch_size, 32);
        assert_eq!(cfg.selection.omega, 8.0);
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn overrides_and_cross_field_checks() {
        let o = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let cfg = RunConfig::load(None, &o(&["diffusion.skip=10", "selection.omega=2.5", "diffusion.method=ddpm"])).unwrap();
        assert_eq!(cfg.diffusion.skip, 10);
        assert_eq!(cfg.selection.omega, 2.5);
        assert_eq!(cfg.diffusion.method, Method::Ddpm);
        assert!(RunConfig::load(None, &o(&["diffusion.skip=7"])).is_err());
        assert!(RunConfig::load(None, &o(&["diffusion.samples=10"])).is_err());
        assert!(RunConfig::load(None, &o(&["model.bogus=1"])).is_err());
        assert!(RunConfig::load(None, &o(&["novalue"])).is_err());
        let mut bad = RunConfig::default();
        bad.bench.steps = vec![30];
        assert!(bad.validate_bench().is_err());
        RunConfig::default().validate_bench().unwrap();
    }
}
