//! Seeded constant-speed scenes with labelled future modes.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::scene::{Mode, ModeLabel, Scene};
use crate::error::{Error, Result};
use crate::geometry::{AgentTrack, Point};

/// Generator settings that are not shared with the rest of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub scenes: usize,
    pub agents_per_scene: usize,
    /// Mixture weights for straight, left, right and stop.
    pub weights: [f64; 4],
    pub speed_min: f64,
    pub speed_max: f64,
    /// Position noise standard deviation (meters).
    pub noise: f64,
    /// Total heading change of a turn (radians).
    pub turn_angle: f64,
    /// Neighbours are placed within this distance of the focal agent.
    pub neighbor_radius: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            scenes: 1000,
            agents_per_scene: 3,
            weights: [0.0, 0.5, 0.5, 0.0],
            speed_min: 1.0,
            speed_max: 1.6,
            noise: 0.02,
            turn_angle: std::f64::consts::FRAC_PI_2,
            neighbor_radius: 8.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub params: SyntheticParams,
    pub seed: u64,
    pub t_p: usize,
    pub t_f: usize,
    pub dt: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.params;
        let sum: f64 = p.weights.iter().sum();
        if p.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("synthetic weights {:?} must be non-negative and sum to 1", p.weights)));
        }
        if !(p.noise >= 0.0) {
            return Err(Error::Config("synthetic noise must be non-negative".into()));
        }
        if !(p.speed_min >= 0.0 && p.speed_max >= p.speed_min) {
            return Err(Error::Config("synthetic speed range must satisfy 0 <= min <= max".into()));
        }
        if p.agents_per_scene == 0 || self.t_p < 2 || self.t_f == 0 || !(self.dt > 0.0) {
            return Err(Error::Config("synthetic scenes need agents >= 1, t_p >= 2, t_f >= 1, dt > 0".into()));
        }
        Ok(())
    }
}

/// Noiseless future positions under `mode`, starting after `anchor`.
pub fn mode_future(mode: Mode, anchor: Point, heading: f64, speed: f64, spec: &SyntheticSpec) -> Vec<Point> {
    let n = spec.t_f;
    let step = speed * spec.dt;
    let turn = spec.params.turn_angle / n as f64;
    let mut p = anchor;
    (1..=n)
        .map(|j| {
            let (h, s) = match mode {
                Mode::Straight => (heading, step),
                Mode::Left => (heading + turn * j as f64, step),
                Mode::Right => (heading - turn * j as f64, step),
                Mode::Stop => (heading, step * (1.0 - 2.0 * j as f64 / n as f64).max(0.0)),
            };
            p = [p[0] + s * h.cos(), p[1] + s * h.sin()];
            p
        })
        .collect()
}

struct Agent {
    track: AgentTrack,
    label: ModeLabel,
}

fn agent(rng: &mut ChaCha8Rng, id: i64, anchor: Point, spec: &SyntheticSpec, modes: &WeightedIndex<f64>) -> Agent {
    let p = &spec.params;
    let heading = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = if p.speed_max > p.speed_min {
        rng.random_range(p.speed_min..p.speed_max)
    } else {
        p.speed_min
    };
    let mode = Mode::ALL[modes.sample(rng)];
    let step = speed * spec.dt;
    let past: Vec<Point> = (0..spec.t_p)
        .map(|k| {
            let back = (spec.t_p - 1 - k) as f64 * step;
            [anchor[0] - back * heading.cos(), anchor[1] - back * heading.sin()]
        })
        .collect();
    let endpoints = Mode::ALL
        .iter()
        .map(|&m| (m, *mode_future(m, anchor, heading, speed, spec).last().unwrap()))
        .collect();
    let future = mode_future(mode, anchor, heading, speed, spec);
    let mut track = AgentTrack { agent_id: id, past, future };
    if p.noise > 0.0 {
        let normal = Normal::new(0.0, p.noise).expect("validated noise");
        for q in track.past.iter_mut().chain(track.future.iter_mut()) {
            q[0] += normal.sample(rng);
            q[1] += normal.sample(rng);
        }
    }
    Agent {
        track,
        label: ModeLabel { mode, endpoints },
    }
}

/// Generates `params.scenes` scenes; scene `i` depends only on `(seed, i)`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<Scene>> {
    spec.validate()?;
    let modes = WeightedIndex::new(spec.params.weights).map_err(|e| Error::Config(e.to_string()))?;
    Ok((0..spec.params.scenes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(i as u64);
            let mut agents = Vec::with_capacity(spec.params.agents_per_scene);
            let mut label = None;
            for a in 0..spec.params.agents_per_scene {
                let anchor = if a == 0 {
                    [rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)]
                } else {
                    let r = spec.params.neighbor_radius * rng.random::<f64>().sqrt();
                    let phi = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
                    let f: &AgentTrack = &agents[0];
                    let c = f.past[spec.t_p - 1];
                    [c[0] + r * phi.cos(), c[1] + r * phi.sin()]
                };
                let g = agent(&mut rng, a as i64, anchor, spec, &modes);
                if a == 0 {
                    label = Some(g.label);
                }
                agents.push(g.track);
            }
            Scene {
                id: format!("synthetic:{}:{i}", spec.seed),
                dt: spec.dt,
                focal: 0,
                agents,
                lanes: None,
                label,
            }
        })
        .collect())
}
