//! Batched reverse chains for DDPM and step-skipping DDIM.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use trajdiff_tensor::Array;

use super::schedule::{ddim_step, ddpm_step, NoiseSchedule};
use crate::error::{Error, Result};
use crate::geometry::Point;

/// Predicts the noise in a batch `y` of shape `[B, T_f, 2]` at step `eta`.
pub trait NoisePredictor {
    fn predict(&self, y: &Array, eta: usize) -> Result<Array>;
}

impl<F> NoisePredictor for F
where
    F: Fn(&Array, usize) -> Result<Array>,
{
    fn predict(&self, y: &Array, eta: usize) -> Result<Array> {
        self(y, eta)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Ddpm,
    Ddim,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ddpm" => Ok(Method::Ddpm),
            "ddim" => Ok(Method::Ddim),
            other => Err(Error::Config(format!("unknown sampler `{other}` (expected ddpm or ddim)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub method: Method,
    /// DDIM stride γ; ignored by DDPM.
    pub skip: usize,
    pub samples: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            method: Method::Ddim,
            skip: 20,
            samples: 100,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::Config("sample count must be at least 1".into()));
        }
        if self.method == Method::Ddim && (self.skip == 0 || schedule.steps() % self.skip != 0) {
            return Err(Error::Config(format!(
                "DDIM skip {} must be positive and divide the {} diffusion steps",
                self.skip,
                schedule.steps()
            )));
        }
        Ok(())
    }

    /// Denoiser evaluations per chain.
    pub fn denoiser_calls(&self, schedule: &NoiseSchedule) -> usize {
        match self.method {
            Method::Ddpm => schedule.steps(),
            Method::Ddim => schedule.steps() / self.skip,
        }
    }
}

/// Steps visited by the reverse chain, starting at `H`; the chain ends at 0.
pub fn timesteps(config: &SamplerConfig, schedule: &NoiseSchedule) -> Result<Vec<usize>> {
    config.validate(schedule)?;
    let h = schedule.steps();
    Ok(match config.method {
        Method::Ddpm => (1..=h).rev().collect(),
        Method::Ddim => (1..=h / config.skip).rev().map(|k| k * config.skip).collect(),
    })
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    /// Clean displacement sequences of the chains that finished.
    pub samples: Vec<Vec<Point>>,
    /// Chain index of each entry of `samples`.
    pub indices: Vec<usize>,
    /// Chains dropped after a numeric failure.
    pub failed: Vec<usize>,
    pub denoiser_calls: usize,
    pub elapsed: Duration,
}

impl SampleOutput {
    /// Wall-clock time amortized over the requested chains.
    pub fn per_sample(&self) -> Duration {
        let n = (self.samples.len() + self.failed.len()).max(1) as u32;
        self.elapsed / n
    }
}

fn chain_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

struct Chains {
    width: usize,
    states: Vec<Vec<f64>>,
    index: Vec<usize>,
    rngs: Vec<ChaCha8Rng>,
}

impl Chains {
    fn batch(&self) -> Array {
        let data: Vec<f64> = self.states.iter().flatten().copied().collect();
        Array::new(vec![self.states.len(), self.width / 2, 2], data).expect("consistent chain widths")
    }

    fn retain(&mut self, keep: &[bool]) {
        let mut it = keep.iter();
        self.states.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.index.retain(|_| *it.next().unwrap());
        let mut it = keep.iter();
        self.rngs.retain(|_| *it.next().unwrap());
    }
}

/// Runs the batched predictor; on a numeric failure, re-runs chains one at a
/// time and reports which ones cannot be evaluated.
fn predict_guarded(denoiser: &dyn NoisePredictor, chains: &Chains, eta: usize) -> Result<(Vec<Vec<f64>>, Vec<bool>)> {
    let n = chains.states.len();
    match denoiser.predict(&chains.batch(), eta) {
        Ok(eps) if eps.all_finite() && eps.len() == n * chains.width => {
            let rows = eps.data().chunks_exact(chains.width).map(<[f64]>::to_vec).collect();
            return Ok((rows, vec![true; n]));
        }
        Ok(eps) if eps.len() != n * chains.width => {
            return Err(Error::Invalid(format!(
                "denoiser returned shape {:?} for a batch of {n}",
                eps.shape()
            )))
        }
        Ok(_) => {}
        Err(e) if e.is_numeric() => {}
        Err(e) => return Err(e),
    }
    let mut rows = Vec::with_capacity(n);
    let mut ok = Vec::with_capacity(n);
    for state in &chains.states {
        let one = Array::new(vec![1, chains.width / 2, 2], state.clone())?;
        match denoiser.predict(&one, eta) {
            Ok(eps) if eps.all_finite() => {
                rows.push(eps.into_vec());
                ok.push(true);
            }
            Ok(_) => {
                rows.push(Vec::new());
                ok.push(false);
            }
            Err(e) if e.is_numeric() => {
                rows.push(Vec::new());
                ok.push(false);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((rows, ok))
}

/// Draws `config.samples` clean sequences of `t_f` displacements. Every chain
/// owns a ChaCha stream selected by its index, so results do not depend on
/// batching.
pub fn sample(
    denoiser: &dyn NoisePredictor,
    t_f: usize,
    config: &SamplerConfig,
    schedule: &NoiseSchedule,
) -> Result<SampleOutput> {
    let plan = timesteps(config, schedule)?;
    let start = Instant::now();
    let width = 2 * t_f;
    let mut rngs: Vec<ChaCha8Rng> = (0..config.samples).map(|j| chain_rng(config.seed, j)).collect();
    let states = rngs.iter_mut().map(|r| normals(r, width)).collect();
    let mut chains = Chains {
        width,
        states,
        index: (0..config.samples).collect(),
        rngs,
    };
    let mut failed = Vec::new();
    let mut calls = 0;
    for (k, &eta) in plan.iter().enumerate() {
        if chains.states.is_empty() {
            break;
        }
        let (eps, ok) = predict_guarded(denoiser, &chains, eta)?;
        calls += 1;
        let mut keep = ok;
        for (j, state) in chains.states.iter_mut().enumerate() {
            if !keep[j] {
                continue;
            }
            let next = match config.method {
                Method::Ddpm if eta > 1 => {
                    let z = normals(&mut chains.rngs[j], width);
                    ddpm_step(state, eta, &eps[j], Some(&z), schedule)
                }
                Method::Ddpm => ddpm_step(state, eta, &eps[j], None, schedule),
                Method::Ddim => {
                    let prev = plan.get(k + 1).copied().unwrap_or(0);
                    ddim_step(state, eta, prev, &eps[j], schedule)
                }
            };
            if next.iter().all(|v| v.is_finite()) {
                *state = next;
            } else {
                keep[j] = false;
            }
        }
        failed.extend(chains.index.iter().zip(&keep).filter(|(_, k)| !**k).map(|(i, _)| *i));
        chains.retain(&keep);
    }
    failed.sort_unstable();
    let samples = chains
        .states
        .iter()
        .map(|s| s.chunks_exact(2).map(|c| [c[0], c[1]]).collect())
        .collect();
    Ok(SampleOutput {
        samples,
        indices: chains.index,
        failed,
        denoiser_calls: calls,
        elapsed: start.elapsed(),
    })
}

/// Runs one deterministic chain from `y` over `plan` and returns every
/// visited state, starting with `y`. DDPM updates use `z = 0`.
pub fn trace_chain(
    denoiser: &dyn NoisePredictor,
    y: &[f64],
    method: Method,
    plan: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Vec<Vec<f64>>> {
    let mut states = vec![y.to_vec()];
    for (k, &eta) in plan.iter().enumerate() {
        let cur = states.last().unwrap();
        let eps = denoiser.predict(&Array::new(vec![1, cur.len() / 2, 2], cur.clone())?, eta)?;
        let next = match method {
            Method::Ddpm => ddpm_step(cur, eta, eps.data(), None, schedule),
            Method::Ddim => ddim_step(cur, eta, plan.get(k + 1).copied().unwrap_or(0), eps.data(), schedule),
        };
        states.push(next);
    }
    Ok(states)
}

/// Reference predictors with known behaviour.
pub mod stubs {
    use super::*;

    /// Always predicts zero noise.
    pub fn zero(y: &Array, _eta: usize) -> Result<Array> {
        Ok(Array::zeros(y.shape()))
    }

    /// Returns the exact noise implied by `y` and a known clean sample.
    pub struct Oracle<'a> {
        pub y0: Vec<f64>,
        pub schedule: &'a NoiseSchedule,
    }

    impl NoisePredictor for Oracle<'_> {
        fn predict(&self, y: &Array, eta: usize) -> Result<Array> {
            let ab = self.schedule.alpha_bar(eta);
            let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
            let w = self.y0.len();
            let data = y
                .data()
                .chunks_exact(w)
                .flat_map(|row| row.iter().zip(&self.y0).map(|(y, y0)| (y - a * y0) / b).collect::<Vec<_>>())
                .collect();
            Ok(Array::new(y.shape().to_vec(), data)?)
        }
    }
}

#[cfg(test)]
mod tests {
    use std::cell::Cell;

    use super::stubs::{zero, Oracle};
    use super::*;

    fn ddim(skip: usize, samples: usize, seed: u64) -> SamplerConfig {
        SamplerConfig {
            method: Method::Ddim,
            skip,
            samples,
            seed,
        }
    }

    #[test]
    fn ddim_plan_has_h_over_gamma_steps() {
        let s = NoiseSchedule::default();
        let plan = timesteps(&ddim(20, 1, 0), &s).unwrap();
        assert_eq!(plan, vec![200, 180, 160, 140, 120, 100, 80, 60, 40, 20]);
        assert_eq!(ddim(20, 1, 0).denoiser_calls(&s), 10);
        let ddpm = SamplerConfig {
            method: Method::Ddpm,
            ..ddim(1, 1, 0)
        };
        assert_eq!(timesteps(&ddpm, &s).unwrap().len(), 200);
        assert!(timesteps(&ddim(7, 1, 0), &s).is_err());
        assert!(timesteps(&ddim(20, 0, 0), &s).is_err());
    }

    #[test]
    fn counts_calls_and_is_reproducible() {
        let s = NoiseSchedule::default();
        let calls = Cell::new(0usize);
        let counting = |y: &Array, _eta: usize| {
            calls.set(calls.get() + 1);
            Ok(Array::zeros(y.shape()))
        };
        let a = sample(&counting, 12, &ddim(20, 5, 9), &s).unwrap();
        assert_eq!(calls.get(), 10);
        assert_eq!(a.denoiser_calls, 10);
        let b = sample(&zero, 12, &ddim(20, 5, 9), &s).unwrap();
        assert_eq!(a.samples, b.samples);
        let c = sample(&zero, 12, &ddim(20, 5, 10), &s).unwrap();
        assert_ne!(a.samples, c.samples);
        assert_eq!(a.samples.len(), 5);
        assert!(a.samples.iter().all(|t| t.len() == 12));
    }

    #[test]
    fn chains_do_not_depend_on_batch_size() {
        let s = NoiseSchedule::default();
        let cfg = SamplerConfig {
            method: Method::Ddpm,
            skip: 1,
            samples: 6,
            seed: 3,
        };
        let all = sample(&zero, 4, &cfg, &s).unwrap();
        let few = sample(&zero, 4, &SamplerConfig { samples: 2, ..cfg }, &s).unwrap();
        assert_eq!(&all.samples[..2], &few.samples[..]);
    }

    #[test]
    fn oracle_denoiser_recovers_clean_sample() {
        let s = NoiseSchedule::default();
        let y0: Vec<f64> = (0..24).map(|i| (i as f64 * 0.7).sin() * 2.0).collect();
        let oracle = Oracle { y0: y0.clone(), schedule: &s };
        for cfg in [ddim(20, 3, 1), ddim(1, 3, 1)] {
            let out = sample(&oracle, 12, &cfg, &s).unwrap();
            for traj in &out.samples {
                for (p, want) in traj.iter().flatten().zip(&y0) {
                    assert!((p - want).abs() < 1e-6);
                }
            }
        }
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 1.3).cos()).collect();
        let plan: Vec<usize> = (1..=200).rev().collect();
        let chain = trace_chain(&oracle, &x, Method::Ddpm, &plan, &s).unwrap();
        for (p, want) in chain.last().unwrap().iter().zip(&y0) {
            assert!((p - want).abs() < 1e-6);
        }
    }

    #[test]
    fn ddim_unit_skip_matches_noise_free_ddpm_on_zero_stub() {
        let s = NoiseSchedule::default();
        let plan: Vec<usize> = (1..=200).rev().collect();
        let x: Vec<f64> = (0..24).map(|i| (i as f64 * 0.37).sin()).collect();
        let a = trace_chain(&zero, &x, Method::Ddim, &plan, &s).unwrap();
        let b = trace_chain(&zero, &x, Method::Ddpm, &plan, &s).unwrap();
        for (sa, sb) in a.iter().zip(&b) {
            for (u, v) in sa.iter().zip(sb) {
                assert!((u - v).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn numeric_failures_drop_only_affected_chains() {
        let s = NoiseSchedule::default();
        // chain whose first coordinate is the largest fails once its value is inspected
        let flaky = |y: &Array, _eta: usize| {
            let out: Vec<f64> = y
                .data()
                .chunks_exact(4)
                .flat_map(|r| if r[0] > 1.0 { vec![f64::NAN; 4] } else { vec![0.0; 4] })
                .collect();
            Ok(Array::new(y.shape().to_vec(), out)?)
        };
        let out = sample(&flaky, 2, &ddim(20, 40, 5), &s).unwrap();
        assert!(!out.failed.is_empty());
        assert_eq!(out.samples.len() + out.failed.len(), 40);
        assert!(out.samples.iter().flatten().flatten().all(|v| v.is_finite()));
        let mut all: Vec<usize> = out.indices.iter().chain(&out.failed).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
    }
}
