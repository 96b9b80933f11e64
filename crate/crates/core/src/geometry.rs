//! Agent-centric, rotation-aligned displacement coordinates.
//!
//! A history `p_{t-T_p+1..t}` becomes `x = [0, Rᵀ(p_{k} - p_{k-1}), ...]`
//! where `R` rotates the agent heading onto `+x`; a future becomes the
//! displacements `y_j = Rᵀ(p_{t+j} - p_{t+j-1})`. Both are unchanged by any
//! rigid motion of the scene.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

pub type Point = [f64; 2];

/// Displacements shorter than this are treated as stationary.
pub const STATIONARY_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentTrack {
    pub agent_id: i64,
    pub past: Vec<Point>,
    #[serde(default)]
    pub future: Vec<Point>,
}

impl AgentTrack {
    pub fn new(agent_id: i64, past: Vec<Point>, future: Vec<Point>) -> Result<Self> {
        let track = AgentTrack { agent_id, past, future };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        if self.past.len() < 2 {
            return Err(Error::Data(format!(
                "agent {} has {} past positions, need at least 2",
                self.agent_id,
                self.past.len()
            )));
        }
        let finite = self.past.iter().chain(&self.future).flatten().all(|v| v.is_finite());
        if !finite {
            return Err(Error::Data(format!("agent {} has non-finite coordinates", self.agent_id)));
        }
        Ok(())
    }

    pub fn has_future(&self) -> bool {
        !self.future.is_empty()
    }

    pub fn anchor(&self) -> Point {
        *self.past.last().expect("validated track")
    }
}

/// Proper 2-D rotation `[[c, -s], [s, c]]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rotation {
    pub cos: f64,
    pub sin: f64,
}

impl Rotation {
    pub fn from_angle(theta: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Rotation { cos, sin }
    }

    pub fn identity() -> Self {
        Rotation { cos: 1.0, sin: 0.0 }
    }

    pub fn angle(&self) -> f64 {
        self.sin.atan2(self.cos)
    }

    /// `R v`: agent frame to world frame.
    pub fn apply(&self, v: Point) -> Point {
        [self.cos * v[0] - self.sin * v[1], self.sin * v[0] + self.cos * v[1]]
    }

    /// `Rᵀ v`: world frame to agent frame.
    pub fn apply_transpose(&self, v: Point) -> Point {
        [self.cos * v[0] + self.sin * v[1], -self.sin * v[0] + self.cos * v[1]]
    }

    pub fn matrix(&self) -> [[f64; 2]; 2] {
        [[self.cos, -self.sin], [self.sin, self.cos]]
    }

    pub fn det(&self) -> f64 {
        self.cos * self.cos + self.sin * self.sin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantHistory {
    pub heading: f64,
    pub rotation: Rotation,
    /// Length `T_p`; the first entry is exactly zero.
    pub displacements: Vec<Point>,
    pub anchor: Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct InvariantFuture {
    pub displacements: Vec<Point>,
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1]]
}

fn norm(v: Point) -> f64 {
    v[0].hypot(v[1])
}

/// Heading of the last non-stationary history displacement, or 0 if the
/// agent never moved.
pub fn compute_heading(track: &AgentTrack) -> f64 {
    track
        .past
        .windows(2)
        .rev()
        .map(|w| sub(w[1], w[0]))
        .find(|d| norm(*d) >= STATIONARY_EPS)
        .map_or(0.0, |d| d[1].atan2(d[0]))
}

pub fn to_invariant_history(track: &AgentTrack) -> Result<InvariantHistory> {
    track.validate()?;
    let heading = compute_heading(track);
    let rotation = Rotation::from_angle(heading);
    let mut displacements = Vec::with_capacity(track.past.len());
    displacements.push([0.0, 0.0]);
    displacements.extend(track.past.windows(2).map(|w| rotation.apply_transpose(sub(w[1], w[0]))));
    Ok(InvariantHistory {
        heading,
        rotation,
        displacements,
        anchor: track.anchor(),
    })
}

pub fn to_invariant_future(track: &AgentTrack, rotation: &Rotation) -> Result<InvariantFuture> {
    if track.future.is_empty() {
        return Err(Error::MissingFuture(track.agent_id));
    }
    let mut prev = track.anchor();
    let displacements = track
        .future
        .iter()
        .map(|&p| {
            let d = rotation.apply_transpose(sub(p, prev));
            prev = p;
            d
        })
        .collect();
    Ok(InvariantFuture { displacements })
}

/// Inverse of [`to_invariant_future`]: `p_{t+j} = p_t + Σ_{i≤j} R y_i`.
pub fn displacements_to_positions(displacements: &[Point], rotation: &Rotation, anchor: Point) -> Vec<Point> {
    let mut p = anchor;
    displacements
        .iter()
        .map(|&d| {
            let w = rotation.apply(d);
            p = [p[0] + w[0], p[1] + w[1]];
            p
        })
        .collect()
}

/// [`displacements_to_positions`] with an explicit horizon check.
pub fn decode_future(displacements: &[Point], t_f: usize, rotation: &Rotation, anchor: Point) -> Result<Vec<Point>> {
    check_len(t_f, displacements.len())?;
    Ok(displacements_to_positions(displacements, rotation, anchor))
}

/// Running sum of displacements in the agent frame (positions relative to `p_t`).
pub fn cumulative(displacements: &[Point]) -> Vec<Point> {
    displacements_to_positions(displacements, &Rotation::identity(), [0.0, 0.0])
}

/// Applies `v ↦ R_φ v + shift` to every position of a track.
pub fn rigid_transform(track: &AgentTrack, phi: f64, shift: Point) -> AgentTrack {
    let r = Rotation::from_angle(phi);
    let f = |p: &Point| {
        let q = r.apply(*p);
        [q[0] + shift[0], q[1] + shift[1]]
    };
    AgentTrack {
        agent_id: track.agent_id,
        past: track.past.iter().map(f).collect(),
        future: track.future.iter().map(f).collect(),
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::FRAC_PI_2;

    use proptest::prelude::*;

    use super::*;

    fn track(past: Vec<Point>, future: Vec<Point>) -> AgentTrack {
        AgentTrack::new(1, past, future).unwrap()
    }

    #[test]
    fn heading_examples() {
        assert_eq!(compute_heading(&track(vec![[0.0, 0.0], [1.0, 0.0]], vec![])), 0.0);
        let up = compute_heading(&track(vec![[0.0, 0.0], [0.0, 2.0]], vec![]));
        assert!((up - FRAC_PI_2).abs() < 1e-15);
        assert_eq!(compute_heading(&track(vec![[2.0, 3.0]; 5], vec![])), 0.0);
        // stationary tail falls back to the last moving displacement
        let t = track(vec![[0.0, 0.0], [0.0, -1.0], [0.0, -1.0]], vec![]);
        assert!((compute_heading(&t) + FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn straight_line_history_is_aligned() {
        let v = 1.3 * 0.4;
        let (c, s) = (0.6, 0.8);
        let past: Vec<Point> = (0..8).map(|k| [5.0 + c * v * k as f64, -2.0 + s * v * k as f64]).collect();
        let h = to_invariant_history(&track(past, vec![])).unwrap();
        assert_eq!(h.displacements[0], [0.0, 0.0]);
        for d in &h.displacements[1..] {
            assert!((d[0] - v).abs() < 1e-12 && d[1].abs() < 1e-12, "{d:?}");
        }
    }

    #[test]
    fn two_point_history() {
        let h = to_invariant_history(&track(vec![[0.0, 0.0], [3.0, 4.0]], vec![])).unwrap();
        assert!((h.heading - 4f64.atan2(3.0)).abs() < 1e-15);
        assert_eq!(h.displacements[0], [0.0, 0.0]);
        assert!((h.displacements[1][0] - 5.0).abs() < 1e-12);
        assert!(h.displacements[1][1].abs() < 1e-12);
    }

    #[test]
    fn future_examples() {
        let t = track(vec![[0.0, 0.0], [1.0, 0.0]], vec![[2.0, 0.0], [3.0, 0.0]]);
        let y = to_invariant_future(&t, &Rotation::identity()).unwrap();
        assert_eq!(y.displacements, vec![[1.0, 0.0], [1.0, 0.0]]);
        let t = track(vec![[0.0, 0.0], [1.0, 1.0]], vec![[1.0, 1.0]; 3]);
        let y = to_invariant_future(&t, &Rotation::from_angle(0.3)).unwrap();
        assert!(y.displacements.iter().flatten().all(|v| *v == 0.0));
        let t = track(vec![[0.0, 0.0], [1.0, 1.0]], vec![]);
        assert!(matches!(
            to_invariant_future(&t, &Rotation::identity()),
            Err(Error::MissingFuture(1))
        ));
    }

    #[test]
    fn decode_examples() {
        let out = displacements_to_positions(&[[1.0, 0.0], [1.0, 0.0]], &Rotation::identity(), [0.0, 0.0]);
        assert_eq!(out, vec![[1.0, 0.0], [2.0, 0.0]]);
        let out = displacements_to_positions(&[[0.0, 0.0]; 3], &Rotation::from_angle(1.0), [4.0, 5.0]);
        assert_eq!(out, vec![[4.0, 5.0]; 3]);
        assert!(decode_future(&[[0.0, 0.0]; 3], 4, &Rotation::identity(), [0.0, 0.0]).is_err());
    }

    #[test]
    fn short_or_non_finite_tracks_are_rejected() {
        assert!(AgentTrack::new(0, vec![[0.0, 0.0]], vec![]).is_err());
        assert!(AgentTrack::new(0, vec![[0.0, 0.0], [f64::NAN, 0.0]], vec![]).is_err());
    }

    fn arb_track() -> impl Strategy<Value = AgentTrack> {
        (2usize..10, 1usize..14).prop_flat_map(|(tp, tf)| {
            (
                prop::collection::vec(prop::array::uniform2(-50.0..50.0f64), tp),
                prop::collection::vec(prop::array::uniform2(-50.0..50.0f64), tf),
            )
                .prop_map(|(past, future)| AgentTrack { agent_id: 0, past, future })
        })
    }

    proptest! {
        #[test]
        fn rotation_is_proper(theta in -10.0..10.0f64) {
            let r = Rotation::from_angle(theta);
            let m = r.matrix();
            prop_assert!((m[0][0].hypot(m[1][0]) - 1.0).abs() < 1e-12);
            prop_assert!((m[0][1].hypot(m[1][1]) - 1.0).abs() < 1e-12);
            prop_assert!((r.det() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn round_trip_and_rigid_invariance(t in arb_track(), phi in -3.2..3.2f64, sx in -1e3..1e3f64, sy in -1e3..1e3f64) {
            let h = to_invariant_history(&t).unwrap();
            let y = to_invariant_future(&t, &h.rotation).unwrap();
            let back = displacements_to_positions(&y.displacements, &h.rotation, h.anchor);
            for (a, b) in back.iter().zip(&t.future) {
                prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
            let moved = rigid_transform(&t, phi, [sx, sy]);
            let h2 = to_invariant_history(&moved).unwrap();
            let y2 = to_invariant_future(&moved, &h2.rotation).unwrap();
            prop_assert_eq!(h2.displacements[0], [0.0, 0.0]);
            for (a, b) in h.displacements.iter().chain(&y.displacements).zip(h2.displacements.iter().chain(&y2.displacements)) {
                prop_assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9, "{:?} vs {:?}", a, b);
            }
        }
    }
}
