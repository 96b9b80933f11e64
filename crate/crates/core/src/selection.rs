//! Score targets for the scorer and the three ways of reducing M candidates to K.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::geometry::Point;
use crate::metrics::{ade, fde};

pub const DEFAULT_LAMBDA: f64 = 1.5;
pub const DEFAULT_OMEGA: f64 = 8.0;
pub const DEFAULT_RADIUS: f64 = 2.0;
pub const DEFAULT_K: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    /// Distance between final positions.
    Endpoint,
    /// Mean distance over all steps.
    Ade,
}

impl std::str::FromStr for Distance {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "endpoint" => Ok(Distance::Endpoint),
            "ade" => Ok(Distance::Ade),
            other => Err(Error::Config(format!("unknown distance `{other}` (expected endpoint or ade)"))),
        }
    }
}

pub fn trajectory_distance(kind: Distance, a: &[Point], b: &[Point]) -> f64 {
    match kind {
        Distance::Endpoint => {
            let (p, q) = (a[a.len() - 1], b[b.len() - 1]);
            (p[0] - q[0]).hypot(p[1] - q[1])
        }
        Distance::Ade => a.iter().zip(b).map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / a.len() as f64,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectMethod {
    Nms,
    Coverage,
    Random,
}

impl SelectMethod {
    pub const ALL: [SelectMethod; 3] = [SelectMethod::Random, SelectMethod::Coverage, SelectMethod::Nms];

    pub fn name(&self) -> &'static str {
        match self {
            SelectMethod::Nms => "nms",
            SelectMethod::Coverage => "coverage",
            SelectMethod::Random => "random",
        }
    }
}

impl std::str::FromStr for SelectMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "nms" => Ok(SelectMethod::Nms),
            "coverage" => Ok(SelectMethod::Coverage),
            "random" => Ok(SelectMethod::Random),
            other => Err(Error::Config(format!(
                "unknown selection `{other}` (expected nms, coverage or random)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectionConfig {
    pub k: usize,
    /// NMS suppression threshold ω in meters.
    pub omega: f64,
    /// Coverage radius r in meters (ADE distance).
    pub radius: f64,
    /// Trajectory distance used by NMS.
    pub distance: Distance,
    /// FDE weight λ in the score targets.
    pub lambda: f64,
    /// Temperature of the target distribution `softmax(-Ψ/T)`.
    pub temperature: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            k: DEFAULT_K,
            omega: DEFAULT_OMEGA,
            radius: DEFAULT_RADIUS,
            distance: Distance::Endpoint,
            lambda: DEFAULT_LAMBDA,
            temperature: 1.0,
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("selection.k must be at least 1".into()));
        }
        for (name, v) in [("omega", self.omega), ("radius", self.radius), ("temperature", self.temperature)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("selection.{name} must be positive, got {v}")));
            }
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("selection.lambda must be non-negative, got {}", self.lambda)));
        }
        Ok(())
    }
}

/// K chosen candidates in output order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    /// Candidate indices.
    pub indices: Vec<usize>,
    /// Method-specific value per member: raw score (NMS), covered count
    /// after the pick (coverage) or 0 (random).
    pub scores: Vec<f64>,
    /// Members added after NMS ran out of unsuppressed candidates.
    pub fills: usize,
}

fn check_k(m: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Invalid("K must be at least 1".into()));
    }
    if m < k {
        return Err(Error::Invalid(format!("cannot select K = {k} from M = {m} candidates")));
    }
    Ok(())
}

/// `ψ_j = ADE(τ, τ̂_j) + λ·FDE(τ, τ̂_j)`.
pub fn gt_scores(truth: &[Point], cands: &[Vec<Point>], lambda: f64) -> Result<Vec<f64>> {
    if cands.is_empty() {
        return Err(Error::Invalid("no candidates".into()));
    }
    cands
        .iter()
        .map(|c| Ok(ade(truth, c)? + lambda * fde(truth, c)?))
        .collect()
}

fn softmax(x: impl Iterator<Item = f64> + Clone) -> Vec<f64> {
    let max = x.clone().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.map(|v| (v - max).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// Target distribution `softmax(-Ψ/T)`: lower error, more mass.
pub fn score_targets(psi: &[f64], temperature: f64) -> Vec<f64> {
    softmax(psi.iter().map(|p| -p / temperature))
}

/// Cross-entropy of `softmax(raw)` against `softmax(-Ψ/T)`.
pub fn scorer_loss(raw: &[f64], psi: &[f64], temperature: f64) -> Result<f64> {
    check_len(psi.len(), raw.len())?;
    if raw.is_empty() {
        return Err(Error::Invalid("no scores".into()));
    }
    let target = score_targets(psi, temperature);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + raw.iter().map(|s| (s - max).exp()).sum::<f64>().ln();
    Ok(-target.iter().zip(raw).map(|(t, s)| t * (s - lse)).sum::<f64>())
}

/// Candidate indices by descending score, ties by index.
pub fn rank_by_score(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression with fill from suppressed candidates.
pub fn nms_select(cands: &[Vec<Point>], scores: &[f64], cfg: &SelectionConfig) -> Result<PredictionSet> {
    check_len(cands.len(), scores.len())?;
    check_k(cands.len(), cfg.k)?;
    let order = rank_by_score(scores);
    let mut kept: Vec<usize> = Vec::with_capacity(cfg.k);
    let mut suppressed = Vec::new();
    for &i in &order {
        if kept.len() == cfg.k {
            break;
        }
        if kept
            .iter()
            .all(|&j| trajectory_distance(cfg.distance, &cands[i], &cands[j]) > cfg.omega)
        {
            kept.push(i);
        } else {
            suppressed.push(i);
        }
    }
    let fills = cfg.k - kept.len();
    kept.extend(suppressed.into_iter().take(fills));
    kept.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    Ok(PredictionSet {
        scores: kept.iter().map(|&i| scores[i]).collect(),
        indices: kept,
        fills,
    })
}

/// `neighbors[i]` lists candidates within ADE distance `< radius` of `i` (including `i`).
fn neighborhoods(cands: &[Vec<Point>], radius: f64) -> Vec<Vec<bool>> {
    let m = cands.len();
    let mut nb = vec![vec![false; m]; m];
    for i in 0..m {
        nb[i][i] = true;
        for j in i + 1..m {
            let close = trajectory_distance(Distance::Ade, &cands[i], &cands[j]) < radius;
            nb[i][j] = close;
            nb[j][i] = close;
        }
    }
    nb
}

/// Number of candidates within `radius` (ADE) of at least one selected member.
pub fn coverage_count(cands: &[Vec<Point>], selected: &[usize], radius: f64) -> usize {
    (0..cands.len())
        .filter(|&j| {
            selected
                .iter()
                .any(|&i| i == j || trajectory_distance(Distance::Ade, &cands[i], &cands[j]) < radius)
        })
        .count()
}

/// Greedy maximum coverage: each pick maximizes the number of candidates
/// within `radius` of the selection, ties to the lower index.
pub fn greedy_coverage_select(cands: &[Vec<Point>], cfg: &SelectionConfig) -> Result<PredictionSet> {
    check_k(cands.len(), cfg.k)?;
    let m = cands.len();
    let nb = neighborhoods(cands, cfg.radius);
    let mut covered = vec![false; m];
    let mut chosen = vec![false; m];
    let mut count = 0;
    let mut set = PredictionSet {
        indices: Vec::with_capacity(cfg.k),
        scores: Vec::with_capacity(cfg.k),
        fills: 0,
    };
    for _ in 0..cfg.k {
        let mut best = (usize::MAX, 0usize);
        for i in (0..m).filter(|&i| !chosen[i]) {
            let gain = (0..m).filter(|&j| nb[i][j] && !covered[j]).count();
            if best.0 == usize::MAX || gain > best.1 {
                best = (i, gain);
            }
        }
        let i = best.0;
        chosen[i] = true;
        for j in 0..m {
            covered[j] |= nb[i][j];
        }
        count += best.1;
        set.indices.push(i);
        set.scores.push(count as f64);
    }
    Ok(set)
}

/// Uniform K-subset without replacement.
pub fn random_select(m: usize, k: usize, seed: u64) -> Result<PredictionSet> {
    check_k(m, k)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let indices = sample(&mut rng, m, k).into_vec();
    Ok(PredictionSet {
        scores: vec![0.0; k],
        indices,
        fills: 0,
    })
}
