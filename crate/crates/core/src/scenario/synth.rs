//! Synthetic scenario generator used in place of recorded driving logs.
//!
//! Maps are built from straight arms radiating from a junction at the world
//! origin. Every arm carries `lanes_per_direction` incoming and outgoing lanes
//! (right-hand traffic); junction connectors join incoming to outgoing lanes.
//! Agents follow sampled lane paths with a constant-acceleration speed profile
//! clamped to the configured speed range.

use super::{normalize_to_target, AgentTrack, Horizon, LaneFlags, LanePolyline, Scenario, TrackState};
use crate::error::{DspError, Result};
use crate::geometry::{cumulative_lengths, point_at_arclength, Polygon, RigidTransform, Vec2};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum MapTemplate {
    StraightRoad,
    TIntersection,
    FourWay,
}

impl MapTemplate {
    pub const ALL: [MapTemplate; 3] = [
        MapTemplate::StraightRoad,
        MapTemplate::TIntersection,
        MapTemplate::FourWay,
    ];

    fn arms(self) -> &'static [Arm] {
        match self {
            MapTemplate::StraightRoad => &[Arm::East, Arm::West],
            MapTemplate::TIntersection => &[Arm::East, Arm::West, Arm::South],
            MapTemplate::FourWay => &[Arm::East, Arm::North, Arm::West, Arm::South],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub template: MapTemplate,
    /// Total agents including the target, in `[1, 8]`.
    pub n_agents: usize,
    /// Speed range in m/s.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Largest |acceleration| sampled for a track, m/s^2.
    pub max_accel: f64,
    pub lanes_per_direction: usize,
    pub lane_width: f64,
    /// Drivable margin beyond the outermost lane edge, meters.
    pub margin: f64,
    /// Length of each arm beyond the junction box, meters.
    pub arm_length: f64,
    /// Parked-obstacle boxes placed on road shoulders.
    pub n_obstacles: usize,
    /// Probability that a non-target agent has missing early observations.
    pub missing_prob: f64,
    pub horizon: HorizonSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HorizonSpec {
    #[serde(rename = "T")]
    pub t: usize,
    #[serde(rename = "H")]
    pub h: usize,
    pub dt: f64,
}

impl Default for HorizonSpec {
    fn default() -> Self {
        let h = Horizon::default();
        HorizonSpec {
            t: h.t,
            h: h.h,
            dt: h.dt,
        }
    }
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            template: MapTemplate::FourWay,
            n_agents: 4,
            speed_min: 3.0,
            speed_max: 8.0,
            max_accel: 1.0,
            lanes_per_direction: 1,
            lane_width: 3.5,
            margin: 1.0,
            arm_length: 80.0,
            n_obstacles: 0,
            missing_prob: 0.3,
            horizon: HorizonSpec::default(),
        }
    }
}

impl SynthSpec {
    pub fn with_template(template: MapTemplate) -> Self {
        SynthSpec {
            template,
            ..Default::default()
        }
    }

    fn check(&self) -> Result<()> {
        let bad = |m: &str| Err(DspError::InfeasibleSpec(m.into()));
        if self.lanes_per_direction == 0 {
            return bad("zero lanes per direction");
        }
        if !(1..=8).contains(&self.n_agents) {
            return bad("agent count must be in [1, 8]");
        }
        if !(self.speed_min > 0.0 && self.speed_min <= self.speed_max && self.speed_max.is_finite()) {
            return bad("speed range must satisfy 0 < min <= max");
        }
        if !(self.lane_width > 0.0) || !(self.margin >= 0.0) || !(self.max_accel >= 0.0) {
            return bad("lane width must be positive, margin and acceleration non-negative");
        }
        if self.horizon.t == 0 || self.horizon.h == 0 || !(self.horizon.dt > 0.0) {
            return bad("empty horizon");
        }
        let reach = self.speed_max * (self.horizon.t as f64 + self.horizon.h as f64) * self.horizon.dt;
        if self.arm_length < reach {
            return bad("arms are too short for the horizon at the maximum speed");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Arm {
    East,
    North,
    West,
    South,
}

impl Arm {
    fn name(self) -> &'static str {
        match self {
            Arm::East => "E",
            Arm::North => "N",
            Arm::West => "W",
            Arm::South => "S",
        }
    }

    /// Outward unit direction from the junction.
    fn dir(self) -> Vec2 {
        match self {
            Arm::East => Vec2::new(1.0, 0.0),
            Arm::North => Vec2::new(0.0, 1.0),
            Arm::West => Vec2::new(-1.0, 0.0),
            Arm::South => Vec2::new(0.0, -1.0),
        }
    }
}

const PIECES_PER_LANE: usize = 2;
const CONNECTOR_POINTS: usize = 12;

struct MapBuild {
    lanes: Vec<LanePolyline>,
    drivable: Vec<Polygon>,
    obstacles: Vec<Polygon>,
    /// Per incoming lane (arm, lane index): ids of its pieces, far to near.
    incoming: Vec<Vec<String>>,
}

fn lane(id: String, centerline: Vec<Vec2>, flags: LaneFlags) -> LanePolyline {
    LanePolyline {
        id,
        centerline,
        predecessors: vec![],
        successors: vec![],
        left_neighbor: vec![],
        right_neighbor: vec![],
        flags,
    }
}

fn split_line(a: Vec2, b: Vec2, pieces: usize) -> Vec<Vec<Vec2>> {
    (0..pieces)
        .map(|p| {
            vec![
                a.lerp(b, p as f64 / pieces as f64),
                a.lerp(b, (p + 1) as f64 / pieces as f64),
            ]
        })
        .collect()
}

fn build_map(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> MapBuild {
    let w = spec.lane_width;
    let k = spec.lanes_per_direction;
    let half = k as f64 * w + spec.margin;
    let junction = spec.template != MapTemplate::StraightRoad;
    let mut lanes: Vec<LanePolyline> = Vec::new();
    let mut drivable = Vec::new();
    let mut incoming = Vec::new();
    // (arm, lane index) -> (first piece id of outgoing, last piece id of incoming)
    let mut out_first: HashMap<(Arm, usize), String> = HashMap::new();
    let mut in_last: HashMap<(Arm, usize), (String, Vec2, Vec2)> = HashMap::new();
    let mut out_start: HashMap<(Arm, usize), Vec2> = HashMap::new();

    for &arm in spec.template.arms() {
        let u = arm.dir();
        let n = u.rotate(std::f64::consts::FRAC_PI_2);
        let far = half + spec.arm_length;
        let (lo, hi) = {
            let c1 = u * (-half) + n * half;
            let c2 = u * far - n * half;
            (
                Vec2::new(c1.x.min(c2.x), c1.y.min(c2.y)),
                Vec2::new(c1.x.max(c2.x), c1.y.max(c2.y)),
            )
        };
        drivable.push(Polygon::rect(lo, hi));
        for i in 0..k {
            let off = w * (i as f64 + 0.5);
            // incoming: drives along -u on the +n side
            let in_pieces = split_line(u * far + n * off, u * half + n * off, PIECES_PER_LANE);
            let mut ids = Vec::new();
            for (p, cl) in in_pieces.into_iter().enumerate() {
                let id = format!("in_{}{}_{}", arm.name(), i, p);
                lanes.push(lane(id.clone(), cl, LaneFlags::default()));
                ids.push(id);
            }
            in_last.insert(
                (arm, i),
                (ids.last().unwrap().clone(), u * half + n * off, -u),
            );
            incoming.push(ids);
            // outgoing: drives along +u on the -n side
            let out_pieces = split_line(u * half - n * off, u * far - n * off, PIECES_PER_LANE);
            for (p, cl) in out_pieces.into_iter().enumerate() {
                let id = format!("out_{}{}_{}", arm.name(), i, p);
                if p == 0 {
                    out_first.insert((arm, i), id.clone());
                }
                lanes.push(lane(id, cl, LaneFlags::default()));
            }
            out_start.insert((arm, i), u * half - n * off);
        }
    }

    let mut index: HashMap<String, usize> =
        lanes.iter().enumerate().map(|(i, l)| (l.id.clone(), i)).collect();
    let link = |lanes: &mut Vec<LanePolyline>, index: &HashMap<String, usize>, from: &str, to: &str| {
        let (a, b) = (index[from], index[to]);
        lanes[a].successors.push(to.to_string());
        lanes[b].predecessors.push(from.to_string());
    };

    // chain pieces within each lane, and set lateral neighbors
    for &arm in spec.template.arms() {
        for i in 0..k {
            for dir in ["in", "out"] {
                for p in 0..PIECES_PER_LANE {
                    let id = format!("{dir}_{}{}_{}", arm.name(), i, p);
                    if p + 1 < PIECES_PER_LANE {
                        let next = format!("{dir}_{}{}_{}", arm.name(), i, p + 1);
                        link(&mut lanes, &index, &id, &next);
                    }
                    let me = index[&id];
                    if i > 0 {
                        lanes[me]
                            .left_neighbor
                            .push(format!("{dir}_{}{}_{}", arm.name(), i - 1, p));
                    }
                    if i + 1 < k {
                        lanes[me]
                            .right_neighbor
                            .push(format!("{dir}_{}{}_{}", arm.name(), i + 1, p));
                    }
                }
            }
        }
    }

    // junction connectors
    for &from in spec.template.arms() {
        for &to in spec.template.arms() {
            if from == to {
                continue;
            }
            let d_in = -from.dir();
            let d_out = to.dir();
            let turn = d_in.cross(d_out);
            let straight = turn.abs() < 1e-9;
            if !junction && !straight {
                continue;
            }
            let lane_pairs: Vec<usize> = if straight {
                (0..k).collect()
            } else if turn > 0.0 {
                vec![0]
            } else {
                vec![k - 1]
            };
            for i in lane_pairs {
                let (ref in_id, p0, _) = in_last[&(from, i)];
                let p2 = out_start[&(to, i)];
                let centerline = if straight {
                    vec![p0, p2]
                } else {
                    // control point: intersection of the entry and exit lines
                    let t = (p2 - p0).cross(d_out) / d_in.cross(d_out);
                    let p1 = p0 + d_in * t;
                    (0..CONNECTOR_POINTS)
                        .map(|j| {
                            let s = j as f64 / (CONNECTOR_POINTS - 1) as f64;
                            p0 * ((1.0 - s) * (1.0 - s)) + p1 * (2.0 * s * (1.0 - s)) + p2 * (s * s)
                        })
                        .collect()
                };
                let flags = LaneFlags {
                    turn_left: !straight && turn > 0.0,
                    turn_right: !straight && turn < 0.0,
                    traffic_control: spec.template == MapTemplate::FourWay,
                    is_intersection: junction,
                };
                let id = format!("conn_{}{}_{}{}", from.name(), i, to.name(), i);
                lanes.push(lane(id.clone(), centerline, flags));
                index.insert(id.clone(), lanes.len() - 1);
                let in_id = in_id.clone();
                link(&mut lanes, &index, &in_id, &id);
                let out_id = out_first[&(to, i)].clone();
                link(&mut lanes, &index, &id, &out_id);
            }
        }
    }

    let mut obstacles = Vec::new();
    if spec.margin >= 0.8 {
        let arms = spec.template.arms();
        for _ in 0..spec.n_obstacles {
            let arm = *arms.choose(rng).unwrap();
            let u = arm.dir();
            let n = u.rotate(std::f64::consts::FRAC_PI_2);
            let side = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let along = half + rng.random_range(10.0..spec.arm_length - 5.0);
            let across = side * (k as f64 * w + spec.margin * 0.5);
            let c = u * along + n * across;
            let ext = u * 2.0 + n * (spec.margin * 0.3);
            let (a, b) = (c - ext, c + ext);
            obstacles.push(Polygon::rect(
                Vec2::new(a.x.min(b.x), a.y.min(b.y)),
                Vec2::new(a.x.max(b.x), a.y.max(b.y)),
            ));
        }
    }

    MapBuild {
        lanes,
        drivable,
        obstacles,
        incoming,
    }
}

/// Concatenates lane centerlines along a random successor walk until `min_len` is reached.
fn sample_path(lanes: &[LanePolyline], start: usize, min_len: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<Vec2>) {
    let index: HashMap<&str, usize> = lanes.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    let mut ids = vec![start];
    let mut pts = lanes[start].centerline.clone();
    let mut len = cumulative_lengths(&pts).last().copied().unwrap_or(0.0);
    let mut cur = start;
    while len < min_len {
        let Some(next) = lanes[cur].successors.choose(rng) else {
            break;
        };
        cur = index[next.as_str()];
        ids.push(cur);
        let cl = &lanes[cur].centerline;
        let skip = usize::from(pts.last() == cl.first());
        pts.extend_from_slice(&cl[skip..]);
        len = cumulative_lengths(&pts).last().copied().unwrap_or(0.0);
    }
    (ids, pts)
}

/// Arc length travelled from t = 0 after `tau` seconds with a clamped constant-acceleration profile.
fn travelled(v0: f64, accel: f64, vmin: f64, vmax: f64, tau: f64) -> f64 {
    const SUB: usize = 40;
    let h = tau / SUB as f64;
    let speed = |t: f64| (v0 + accel * t).clamp(vmin, vmax);
    (0..SUB)
        .map(|j| {
            let (a, b) = (j as f64 * h, (j + 1) as f64 * h);
            0.5 * h * (speed(a) + speed(b))
        })
        .sum()
}

struct Motion {
    v0: f64,
    accel: f64,
    s0: f64,
}

fn make_track(id: String, path: &[Vec2], m: &Motion, spec: &SynthSpec, with_future: bool) -> AgentTrack {
    let hz = spec.horizon;
    let cum = cumulative_lengths(path);
    let at = |tau: f64| {
        let s = m.s0 + travelled(m.v0, m.accel, spec.speed_min, spec.speed_max, tau);
        point_at_arclength(path, &cum, s)
    };
    let states = (0..hz.t)
        .map(|k| {
            let tau = (k as f64 - (hz.t - 1) as f64) * hz.dt;
            let (pos, dir) = at(tau);
            TrackState { pos, dir, pad: false }
        })
        .collect();
    let gt_future = with_future.then(|| (1..=hz.h).map(|k| at(k as f64 * hz.dt).0).collect());
    AgentTrack {
        id,
        states,
        is_target: false,
        gt_future,
    }
}

fn sample_motion(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> (f64, f64) {
    let v0 = if spec.speed_max > spec.speed_min {
        rng.random_range(spec.speed_min..=spec.speed_max)
    } else {
        spec.speed_min
    };
    let accel = if spec.max_accel > 0.0 && spec.speed_max > spec.speed_min {
        rng.random_range(-spec.max_accel..=spec.max_accel)
    } else {
        0.0
    };
    (v0, accel)
}

/// Generates a target-centric scenario; pure in `(spec, seed)`.
pub fn synth_scenario(spec: &SynthSpec, seed: u64) -> Result<Scenario> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let map = build_map(spec, &mut rng);
    let hz = spec.horizon;
    let hist = (hz.t - 1) as f64 * hz.dt;
    let fut = hz.h as f64 * hz.dt;
    let mut tracks = Vec::new();

    // target: approach the junction on an incoming lane
    let start_ids = map.incoming.choose(&mut rng).unwrap();
    let start = map.lanes.iter().position(|l| l.id == start_ids[0]).unwrap();
    let approach: f64 = start_ids
        .iter()
        .map(|id| {
            let l = map.lanes.iter().find(|l| &l.id == id).unwrap();
            *cumulative_lengths(&l.centerline).last().unwrap()
        })
        .sum();
    let (v0, accel) = sample_motion(spec, &mut rng);
    let to_entry = rng.random_range(0.0..(approach - spec.speed_max * hist).clamp(0.1, 25.0));
    let (_, path) = sample_path(&map.lanes, start, approach + 2.0 * spec.arm_length, &mut rng);
    let mut target = make_track(
        "target".into(),
        &path,
        &Motion {
            v0,
            accel,
            s0: approach - to_entry,
        },
        spec,
        true,
    );
    target.is_target = true;
    tracks.push(target);

    let starts: Vec<usize> = map
        .lanes
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.id.starts_with("conn"))
        .map(|(i, _)| i)
        .collect();
    for a in 1..spec.n_agents {
        let mut made = None;
        for _ in 0..20 {
            let s = *starts.choose(&mut rng).unwrap();
            let (v0, accel) = sample_motion(spec, &mut rng);
            let need_back = spec.speed_max * hist;
            let need_fwd = spec.speed_max * fut;
            let (_, path) = sample_path(&map.lanes, s, need_back + need_fwd + 10.0, &mut rng);
            let total = *cumulative_lengths(&path).last().unwrap();
            if total < need_back + need_fwd {
                continue;
            }
            let s0 = rng.random_range(need_back..=total - need_fwd);
            made = Some(make_track(format!("agent{a}"), &path, &Motion { v0, accel, s0 }, spec, false));
            break;
        }
        let Some(mut tr) = made else {
            continue;
        };
        if rng.random_bool(spec.missing_prob.clamp(0.0, 1.0)) {
            let missing = rng.random_range(1..=(hz.t / 2).max(1)).min(hz.t - 1);
            let first = tr.states[missing];
            for st in &mut tr.states[..missing] {
                *st = TrackState {
                    pos: first.pos,
                    dir: first.dir,
                    pad: true,
                };
            }
        }
        tracks.push(tr);
    }

    let world = Scenario {
        horizon: Horizon {
            t: hz.t,
            h: hz.h,
            dt: hz.dt,
        },
        tracks,
        lanes: map.lanes,
        drivable_polygons: map.drivable,
        obstacle_polygons: map.obstacles,
        frame: RigidTransform::IDENTITY,
    };
    world.validate()?;
    normalize_to_target(&world)
}
