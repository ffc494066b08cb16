//! Scenario data model: agent tracks, lane polylines and drivable-area
//! polygons, plus target-centric normalization and training augmentation.

mod io;
pub mod synth;

pub use io::{read_scenario, scenario_from_str, scenario_to_string, write_scenario, SCHEMA_VERSION};
pub use synth::{synth_scenario, MapTemplate, SynthSpec};

use crate::error::{DspError, Result};
use crate::geometry::{Polygon, RigidTransform, Vec2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;
use std::f64::consts::PI;

/// Number of values per observed state: position, unit tangent, padding flag.
pub const STATE_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Horizon {
    /// Observed steps.
    pub t: usize,
    /// Predicted steps.
    pub h: usize,
    /// Step length in seconds.
    pub dt: f64,
}

impl Default for Horizon {
    fn default() -> Self {
        Horizon {
            t: 20,
            h: 30,
            dt: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackState {
    pub pos: Vec2,
    pub dir: Vec2,
    pub pad: bool,
}

impl TrackState {
    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.pos.x,
            self.pos.y,
            self.dir.x,
            self.dir.y,
            if self.pad { 1.0 } else { 0.0 },
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentTrack {
    pub id: String,
    /// Oldest first; the last entry is the current (t = 0) state.
    pub states: Vec<TrackState>,
    pub is_target: bool,
    pub gt_future: Option<Vec<Vec2>>,
}

impl AgentTrack {
    /// The current state (t = 0).
    pub fn current(&self) -> &TrackState {
        self.states.last().expect("track has states")
    }

    /// Ground-truth goal: the last future position.
    pub fn gt_goal(&self) -> Option<Vec2> {
        self.gt_future.as_ref().and_then(|f| f.last().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LaneFlags {
    pub turn_left: bool,
    pub turn_right: bool,
    pub traffic_control: bool,
    pub is_intersection: bool,
}

impl LaneFlags {
    pub fn to_array(&self) -> [f64; 4] {
        let b = |v: bool| if v { 1.0 } else { 0.0 };
        [
            b(self.turn_left),
            b(self.turn_right),
            b(self.traffic_control),
            b(self.is_intersection),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanePolyline {
    pub id: String,
    pub centerline: Vec<Vec2>,
    pub predecessors: Vec<String>,
    pub successors: Vec<String>,
    pub left_neighbor: Vec<String>,
    pub right_neighbor: Vec<String>,
    pub flags: LaneFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub horizon: Horizon,
    pub tracks: Vec<AgentTrack>,
    pub lanes: Vec<LanePolyline>,
    pub drivable_polygons: Vec<Polygon>,
    pub obstacle_polygons: Vec<Polygon>,
    /// Maps the scenario's current coordinates back to the original (world) frame.
    pub frame: RigidTransform,
}

impl Scenario {
    pub fn target_index(&self) -> Result<usize> {
        let mut it = self.tracks.iter().enumerate().filter(|(_, t)| t.is_target);
        let first = it.next().ok_or(DspError::NoTarget)?.0;
        let extra = it.count();
        if extra > 0 {
            return Err(DspError::MultipleTargets(extra + 1));
        }
        Ok(first)
    }

    pub fn target(&self) -> Result<&AgentTrack> {
        Ok(&self.tracks[self.target_index()?])
    }

    pub fn lane_index(&self) -> HashMap<&str, usize> {
        self.lanes
            .iter()
            .enumerate()
            .map(|(i, l)| (l.id.as_str(), i))
            .collect()
    }

    /// Checks every type invariant; called on load and after synthesis.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DspError::InvalidScenario(m));
        let hz = self.horizon;
        if hz.t == 0 || hz.h == 0 || !(hz.dt > 0.0) {
            return bad(format!("bad horizon {hz:?}"));
        }
        self.target_index()?;
        for tr in &self.tracks {
            if tr.states.len() != hz.t {
                return bad(format!(
                    "track '{}' has {} states, expected T = {}",
                    tr.id,
                    tr.states.len(),
                    hz.t
                ));
            }
            for (k, s) in tr.states.iter().enumerate() {
                if !s.pos.is_finite() || !s.dir.is_finite() {
                    return bad(format!("track '{}' state {k} is not finite", tr.id));
                }
                if !s.pad && (s.dir.norm() - 1.0).abs() > 1e-6 {
                    return bad(format!(
                        "track '{}' state {k} tangent is not unit length",
                        tr.id
                    ));
                }
            }
            if let Some(f) = &tr.gt_future {
                if f.len() != hz.h {
                    return bad(format!(
                        "track '{}' gt_future has {} points, expected H = {}",
                        tr.id,
                        f.len(),
                        hz.h
                    ));
                }
                if f.iter().any(|p| !p.is_finite()) {
                    return bad(format!("track '{}' gt_future is not finite", tr.id));
                }
            }
        }
        let index = self.lane_index();
        if index.len() != self.lanes.len() {
            return bad("duplicate lane ids".into());
        }
        for lane in &self.lanes {
            if lane.centerline.len() < 2 {
                return bad(format!("lane '{}' centerline has < 2 points", lane.id));
            }
            if lane.centerline.iter().any(|p| !p.is_finite()) {
                return bad(format!("lane '{}' centerline is not finite", lane.id));
            }
            let refs = lane
                .predecessors
                .iter()
                .chain(&lane.successors)
                .chain(&lane.left_neighbor)
                .chain(&lane.right_neighbor);
            for r in refs {
                if !index.contains_key(r.as_str()) {
                    return bad(format!("lane '{}' references unknown lane '{r}'", lane.id));
                }
            }
            for s in &lane.successors {
                if !self.lanes[index[s.as_str()]].predecessors.contains(&lane.id) {
                    return bad(format!(
                        "lane '{}' lists successor '{s}' without the reciprocal predecessor",
                        lane.id
                    ));
                }
            }
            for p in &lane.predecessors {
                if !self.lanes[index[p.as_str()]].successors.contains(&lane.id) {
                    return bad(format!(
                        "lane '{}' lists predecessor '{p}' without the reciprocal successor",
                        lane.id
                    ));
                }
            }
        }
        for (kind, polys) in [
            ("drivable", &self.drivable_polygons),
            ("obstacle", &self.obstacle_polygons),
        ] {
            for (i, poly) in polys.iter().enumerate() {
                if poly.ring.len() < 3 || poly.ring.iter().any(|p| !p.is_finite()) {
                    return bad(format!("{kind} polygon {i} is degenerate or not finite"));
                }
            }
        }
        Ok(())
    }

    /// Applies `t` to every geometric field and records it in `frame`.
    pub fn transformed(&self, t: &RigidTransform) -> Scenario {
        let tracks = self
            .tracks
            .iter()
            .map(|tr| AgentTrack {
                id: tr.id.clone(),
                states: tr
                    .states
                    .iter()
                    .map(|s| TrackState {
                        pos: t.apply(s.pos),
                        dir: t.apply_dir(s.dir),
                        pad: s.pad,
                    })
                    .collect(),
                is_target: tr.is_target,
                gt_future: tr
                    .gt_future
                    .as_ref()
                    .map(|f| f.iter().map(|p| t.apply(*p)).collect()),
            })
            .collect();
        let lanes = self
            .lanes
            .iter()
            .map(|l| {
                let mut lane = LanePolyline {
                    centerline: l.centerline.iter().map(|p| t.apply(*p)).collect(),
                    ..l.clone()
                };
                if t.mirror {
                    // left and right trade places in a mirrored world
                    std::mem::swap(&mut lane.left_neighbor, &mut lane.right_neighbor);
                    std::mem::swap(&mut lane.flags.turn_left, &mut lane.flags.turn_right);
                }
                lane
            })
            .collect();
        Scenario {
            horizon: self.horizon,
            tracks,
            lanes,
            drivable_polygons: self
                .drivable_polygons
                .iter()
                .map(|p| p.transformed(t))
                .collect(),
            obstacle_polygons: self
                .obstacle_polygons
                .iter()
                .map(|p| p.transformed(t))
                .collect(),
            frame: t.inverse().then(&self.frame),
        }
    }
}

/// The transform taking scenario coordinates to the target-centric frame.
pub fn target_frame(s: &Scenario) -> Result<RigidTransform> {
    let target = s.target()?;
    let cur = target.current();
    if cur.pad {
        return Err(DspError::PaddedTarget);
    }
    let dir = cur.dir.normalized().ok_or(DspError::DegenerateHeading)?;
    let heading = dir.y.atan2(dir.x);
    Ok(RigidTransform::new(-heading, -(cur.pos.rotate(-heading))))
}

/// Moves the target's current position to the origin and aligns its heading with +x.
pub fn normalize_to_target(s: &Scenario) -> Result<Scenario> {
    let t = target_frame(s)?;
    Ok(s.transformed(&t))
}

/// A random rotation about the origin, optionally preceded by a mirror across the x-axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Augmentation {
    pub rotation: f64,
    pub mirror: bool,
}

impl Augmentation {
    pub fn sample(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rotation = rng.random_range(-PI..PI);
        let mirror = rng.random_bool(0.5);
        Augmentation { rotation, mirror }
    }

    pub fn transform(&self) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation,
            translation: Vec2::ZERO,
            mirror: self.mirror,
        }
    }

    pub fn apply(&self, s: &Scenario) -> Scenario {
        s.transformed(&self.transform())
    }
}

/// Training-time augmentation, deterministic for a fixed seed.
pub fn augment(s: &Scenario, seed: u64) -> Scenario {
    Augmentation::sample(seed).apply(s)
}

/// Small hand-built scenarios for tests and examples.
pub mod samples {
    use super::*;

    /// Constant-velocity track whose current position is `start`.
    pub fn straight_track(id: &str, start: Vec2, dir: Vec2, speed: f64, hz: Horizon) -> AgentTrack {
        let dir = dir.normalized().unwrap();
        let states = (0..hz.t)
            .map(|k| {
                let tau = (k as f64 - (hz.t - 1) as f64) * hz.dt;
                TrackState {
                    pos: start + dir * (speed * tau),
                    dir,
                    pad: false,
                }
            })
            .collect();
        let gt_future = (1..=hz.h)
            .map(|k| start + dir * (speed * k as f64 * hz.dt))
            .collect();
        AgentTrack {
            id: id.into(),
            states,
            is_target: false,
            gt_future: Some(gt_future),
        }
    }

    /// One straight lane in a 10 m wide corridor, a target heading +y and one other agent.
    /// Not in the target frame.
    pub fn simple_scenario() -> Scenario {
        simple_scenario_with(Horizon::default())
    }

    pub fn simple_scenario_with(hz: Horizon) -> Scenario {
        let mut target = straight_track("target", Vec2::new(5.0, 3.0), Vec2::new(0.0, 1.0), 5.0, hz);
        target.is_target = true;
        let mut other = straight_track("other", Vec2::new(-4.0, 1.0), Vec2::new(1.0, 1.0), 3.0, hz);
        other.gt_future = None;
        Scenario {
            horizon: hz,
            tracks: vec![target, other],
            lanes: vec![LanePolyline {
                id: "l0".into(),
                centerline: vec![Vec2::new(5.0, -20.0), Vec2::new(5.0, 40.0)],
                predecessors: vec![],
                successors: vec![],
                left_neighbor: vec![],
                right_neighbor: vec![],
                flags: LaneFlags::default(),
            }],
            drivable_polygons: vec![Polygon::rect(Vec2::new(0.0, -20.0), Vec2::new(10.0, 40.0))],
            obstacle_polygons: vec![],
            frame: RigidTransform::IDENTITY,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::samples::*;
    use super::*;
    use proptest::{prop_assert, proptest};

    #[test]
    fn normalize_moves_target_to_origin_heading_x() {
        let s = simple_scenario();
        let n = normalize_to_target(&s).unwrap();
        let cur = n.target().unwrap().current();
        assert!(cur.pos.norm() < 1e-12);
        assert!(cur.dir.dist(Vec2::new(1.0, 0.0)) < 1e-12);
        // former +y is now +x: the target's future lies along +x
        let goal = n.target().unwrap().gt_goal().unwrap();
        assert!((goal.x - 15.0).abs() < 1e-9 && goal.y.abs() < 1e-9);
        // the frame maps back to the original coordinates
        let back = n.frame.apply(goal);
        assert!(back.dist(s.target().unwrap().gt_goal().unwrap()) < 1e-9);
    }

    #[test]
    fn normalize_already_normalized_is_identity() {
        let n = normalize_to_target(&simple_scenario()).unwrap();
        let t = target_frame(&n).unwrap();
        assert!(t.is_identity(1e-12));
    }

    #[test]
    fn normalize_errors() {
        let mut s = simple_scenario();
        s.tracks[0].is_target = false;
        assert!(matches!(normalize_to_target(&s), Err(DspError::NoTarget)));
        let mut s = simple_scenario();
        let last = s.horizon.t - 1;
        s.tracks[0].states[last].dir = Vec2::ZERO;
        assert!(matches!(
            normalize_to_target(&s),
            Err(DspError::DegenerateHeading)
        ));
    }

    #[test]
    fn augment_is_deterministic_and_mirror_involutive() {
        let s = normalize_to_target(&simple_scenario()).unwrap();
        assert_eq!(augment(&s, 11), augment(&s, 11));
        let m = Augmentation {
            rotation: 0.0,
            mirror: true,
        };
        let twice = m.apply(&m.apply(&s));
        for (a, b) in twice.tracks.iter().zip(&s.tracks) {
            for (x, y) in a.states.iter().zip(&b.states) {
                assert!(x.pos.dist(y.pos) < 1e-9 && x.dir.dist(y.dir) < 1e-9);
            }
        }
        assert_eq!(twice.lanes, s.lanes);
        assert!(twice.frame.then(&s.frame.inverse()).is_identity(1e-9));
    }

    fn random_scenario(seed: u64) -> Scenario {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hz = Horizon::default();
        let mut tracks = Vec::new();
        for i in 0..4 {
            let start = Vec2::new(rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0));
            let dir = Vec2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let mut tr = straight_track(&format!("a{i}"), start, dir, rng.random_range(0.5..15.0), hz);
            tr.is_target = i == 0;
            tracks.push(tr);
        }
        let mut s = simple_scenario();
        s.tracks = tracks;
        s
    }

    proptest! {
        #[test]
        fn normalize_twice_is_identity(seed in 0u64..10_000) {
            let n = normalize_to_target(&random_scenario(seed)).unwrap();
            let t = target_frame(&n).unwrap();
            prop_assert!(t.translation.norm() < 1e-9);
            prop_assert!(t.rotation.abs() < 1e-9);
        }

        #[test]
        fn augmentation_preserves_pairwise_distances(seed in 0u64..10_000) {
            let s = normalize_to_target(&random_scenario(seed)).unwrap();
            let a = augment(&s, seed.wrapping_mul(31));
            for t in 0..s.horizon.t {
                for i in 0..s.tracks.len() {
                    for j in 0..s.tracks.len() {
                        let d0 = s.tracks[i].states[t].pos.dist(s.tracks[j].states[t].pos);
                        let d1 = a.tracks[i].states[t].pos.dist(a.tracks[j].states[t].pos);
                        prop_assert!((d0 - d1).abs() < 1e-9);
                    }
                }
            }
        }
    }
}
