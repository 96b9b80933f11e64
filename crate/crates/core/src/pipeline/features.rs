//! Scene to network-input conversion.

use std::collections::BTreeMap;

use trajdiff_tensor::{Array, Bound, Tape, Var};

use crate::data::Scene;
use crate::error::{Error, Result};
use crate::geometry::{cumulative, to_invariant_future, to_invariant_history, InvariantHistory, Point};
use crate::networks::{encoder, ArchConfig, Dropout};

/// Invariant inputs of one scene.
#[derive(Clone, Debug)]
pub struct SceneInputs {
    pub histories: Vec<InvariantHistory>,
    /// Future displacements `y` per agent, when known.
    pub futures: Vec<Option<Vec<Point>>>,
    pub lanes: Option<Vec<Vec<f64>>>,
}

impl SceneInputs {
    pub fn new(scene: &Scene, arch: &ArchConfig) -> Result<Self> {
        scene.validate(arch.t_p, arch.t_f)?;
        let histories = scene
            .agents
            .iter()
            .map(to_invariant_history)
            .collect::<Result<Vec<_>>>()?;
        let futures = scene
            .agents
            .iter()
            .zip(&histories)
            .map(|(a, h)| {
                if a.has_future() {
                    to_invariant_future(a, &h.rotation).map(|f| Some(f.displacements))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let lanes = match (arch.lane_dim, &scene.lanes) {
            (Some(f), Some(l)) => {
                if l[0].len() != f {
                    return Err(Error::Data(format!(
                        "scene {} has lane features of width {}, model expects {f}",
                        scene.id,
                        l[0].len()
                    )));
                }
                Some(l.clone())
            }
            _ => None,
        };
        Ok(SceneInputs {
            histories,
            futures,
            lanes,
        })
    }

    pub fn agents(&self) -> usize {
        self.histories.len()
    }

    /// Batching key: scenes are stacked only when agent and lane counts agree.
    pub fn key(&self) -> (usize, usize) {
        (self.agents(), self.lanes.as_ref().map_or(0, Vec::len))
    }

    /// Focal ground truth in the agent frame (positions relative to `p_t`).
    pub fn relative_future(&self, agent: usize) -> Option<Vec<Point>> {
        self.futures[agent].as_deref().map(cumulative)
    }
}

/// Scenes stacked for one encoder call: histories `[S, N, T_p, 2]`, lanes `[S, L, F]`.
#[derive(Clone, Debug)]
pub struct EncoderGroup {
    pub hist: Array,
    pub lanes: Option<Array>,
}

impl EncoderGroup {
    pub fn stack(inputs: &[&SceneInputs], arch: &ArchConfig) -> Result<Self> {
        let first = inputs.first().ok_or_else(|| Error::Invalid("empty encoder group".into()))?;
        let key = first.key();
        if inputs.iter().any(|i| i.key() != key) {
            return Err(Error::Invalid("encoder group mixes agent or lane counts".into()));
        }
        let (n, l) = key;
        let mut hist = Vec::with_capacity(inputs.len() * n * arch.t_p * 2);
        for i in inputs {
            for h in &i.histories {
                hist.extend(h.displacements.iter().flatten());
            }
        }
        let hist = Array::new(vec![inputs.len(), n, arch.t_p, 2], hist)?;
        let lanes = match (l, arch.lane_dim) {
            (0, _) | (_, None) => None,
            (l, Some(f)) => {
                let data: Vec<f64> = inputs.iter().flat_map(|i| i.lanes.iter().flatten().flatten().copied()).collect();
                Some(Array::new(vec![inputs.len(), l, f], data)?)
            }
        };
        Ok(EncoderGroup { hist, lanes })
    }

    /// Encoder output reshaped to `[S·N, d_c]`.
    pub fn encode(&self, t: &mut Tape, p: &Bound, arch: &ArchConfig, drop: &mut Dropout) -> Result<Var> {
        let h = t.constant(self.hist.clone());
        let l = self.lanes.clone().map(|l| t.constant(l));
        let c = encoder::encode(t, p, arch, h, l, drop)?;
        let rows = self.hist.shape()[0] * self.hist.shape()[1];
        Ok(t.reshape(c, vec![rows, arch.d_c])?)
    }
}

/// Groups scene indices by batching key, preserving order within groups.
pub fn group_by_key(inputs: &[&SceneInputs]) -> Vec<Vec<usize>> {
    let mut groups: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, inp) in inputs.iter().enumerate() {
        groups.entry(inp.key()).or_default().push(i);
    }
    groups.into_values().collect()
}

/// Flattens agent-frame candidate positions to `[M·2·T_f]`.
pub fn flatten(cands: &[Vec<Point>]) -> Vec<f64> {
    cands.iter().flatten().flatten().copied().collect()
}

/// SplitMix64 finalizer; mixes a base seed with an index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
