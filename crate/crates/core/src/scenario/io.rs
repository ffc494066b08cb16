//! Versioned JSON scenario files.
//!
//! ```text
//! {
//!   "schema_version": 1,
//!   "horizon": {"T": 20, "H": 30, "dt": 0.1},
//!   "tracks": [{"id": "...", "is_target": true,
//!               "states": [[x, y, dx, dy, pad], ...],
//!               "gt_future": [[x, y], ...]}],
//!   "lanes": [{"id": "...", "centerline": [[x, y], ...],
//!              "predecessors": [], "successors": [],
//!              "left_neighbor": [], "right_neighbor": [],
//!              "flags": {"turn_left": false, "turn_right": false,
//!                        "traffic_control": false, "is_intersection": false}}],
//!   "drivable_polygons": [[[x, y], ..., [x0, y0]]],
//!   "obstacle_polygons": []
//! }
//! ```
//!
//! Unknown keys are ignored so newer writers stay readable.

use super::{AgentTrack, Horizon, LaneFlags, LanePolyline, Scenario, TrackState};
use crate::error::{DspError, Result};
use crate::geometry::{Polygon, RigidTransform, Vec2};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const SCHEMA_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct HorizonWire {
    #[serde(rename = "T")]
    t: usize,
    #[serde(rename = "H")]
    h: usize,
    dt: f64,
}

#[derive(Serialize, Deserialize)]
struct TrackWire {
    id: String,
    is_target: bool,
    states: Vec<[f64; 5]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gt_future: Option<Vec<[f64; 2]>>,
}

#[derive(Serialize, Deserialize)]
struct FlagsWire {
    #[serde(default)]
    turn_left: bool,
    #[serde(default)]
    turn_right: bool,
    #[serde(default)]
    traffic_control: bool,
    #[serde(default)]
    is_intersection: bool,
}

#[derive(Serialize, Deserialize)]
struct LaneWire {
    id: String,
    centerline: Vec<[f64; 2]>,
    #[serde(default)]
    predecessors: Vec<String>,
    #[serde(default)]
    successors: Vec<String>,
    #[serde(default)]
    left_neighbor: Vec<String>,
    #[serde(default)]
    right_neighbor: Vec<String>,
    flags: FlagsWire,
}

#[derive(Serialize, Deserialize)]
struct ScenarioWire {
    schema_version: u64,
    horizon: HorizonWire,
    tracks: Vec<TrackWire>,
    lanes: Vec<LaneWire>,
    drivable_polygons: Vec<Vec<[f64; 2]>>,
    obstacle_polygons: Vec<Vec<[f64; 2]>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame: Option<RigidTransform>,
}

#[derive(Deserialize)]
struct VersionProbe {
    schema_version: Option<u64>,
}

fn json_err(e: serde_json::Error) -> DspError {
    DspError::Parse {
        line: Some(e.line()),
        field: "json".into(),
        message: e.to_string(),
    }
}

fn closed_ring(p: &Polygon) -> Vec<[f64; 2]> {
    let mut ring: Vec<[f64; 2]> = p.ring.iter().map(|v| (*v).into()).collect();
    if let Some(first) = ring.first().copied() {
        ring.push(first);
    }
    ring
}

fn open_ring(ring: &[[f64; 2]]) -> Polygon {
    let mut pts: Vec<Vec2> = ring.iter().map(|v| Vec2::from(*v)).collect();
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    Polygon::new(pts)
}

fn to_wire(s: &Scenario) -> ScenarioWire {
    ScenarioWire {
        schema_version: SCHEMA_VERSION,
        horizon: HorizonWire {
            t: s.horizon.t,
            h: s.horizon.h,
            dt: s.horizon.dt,
        },
        tracks: s
            .tracks
            .iter()
            .map(|tr| TrackWire {
                id: tr.id.clone(),
                is_target: tr.is_target,
                states: tr.states.iter().map(TrackState::to_array).collect(),
                gt_future: tr
                    .gt_future
                    .as_ref()
                    .map(|f| f.iter().map(|p| (*p).into()).collect()),
            })
            .collect(),
        lanes: s
            .lanes
            .iter()
            .map(|l| LaneWire {
                id: l.id.clone(),
                centerline: l.centerline.iter().map(|p| (*p).into()).collect(),
                predecessors: l.predecessors.clone(),
                successors: l.successors.clone(),
                left_neighbor: l.left_neighbor.clone(),
                right_neighbor: l.right_neighbor.clone(),
                flags: FlagsWire {
                    turn_left: l.flags.turn_left,
                    turn_right: l.flags.turn_right,
                    traffic_control: l.flags.traffic_control,
                    is_intersection: l.flags.is_intersection,
                },
            })
            .collect(),
        drivable_polygons: s.drivable_polygons.iter().map(closed_ring).collect(),
        obstacle_polygons: s.obstacle_polygons.iter().map(closed_ring).collect(),
        frame: (!s.frame.is_identity(0.0)).then_some(s.frame),
    }
}

fn from_wire(w: ScenarioWire) -> Result<Scenario> {
    let horizon = Horizon {
        t: w.horizon.t,
        h: w.horizon.h,
        dt: w.horizon.dt,
    };
    let mut tracks = Vec::with_capacity(w.tracks.len());
    for (i, tr) in w.tracks.into_iter().enumerate() {
        if tr.states.len() != horizon.t {
            return Err(DspError::parse(
                format!("tracks[{i}].states"),
                format!(
                    "track '{}' has {} states, expected T = {}",
                    tr.id,
                    tr.states.len(),
                    horizon.t
                ),
            ));
        }
        let mut states = Vec::with_capacity(tr.states.len());
        for (k, v) in tr.states.iter().enumerate() {
            let pad = match v[4] {
                x if x == 0.0 => false,
                x if x == 1.0 => true,
                x => {
                    return Err(DspError::parse(
                        format!("tracks[{i}].states[{k}][4]"),
                        format!("track '{}': pad flag must be 0 or 1, got {x}", tr.id),
                    ))
                }
            };
            states.push(TrackState {
                pos: Vec2::new(v[0], v[1]),
                dir: Vec2::new(v[2], v[3]),
                pad,
            });
        }
        tracks.push(AgentTrack {
            id: tr.id,
            states,
            is_target: tr.is_target,
            gt_future: tr
                .gt_future
                .map(|f| f.into_iter().map(Vec2::from).collect()),
        });
    }
    let lanes = w
        .lanes
        .into_iter()
        .map(|l| LanePolyline {
            id: l.id,
            centerline: l.centerline.into_iter().map(Vec2::from).collect(),
            predecessors: l.predecessors,
            successors: l.successors,
            left_neighbor: l.left_neighbor,
            right_neighbor: l.right_neighbor,
            flags: LaneFlags {
                turn_left: l.flags.turn_left,
                turn_right: l.flags.turn_right,
                traffic_control: l.flags.traffic_control,
                is_intersection: l.flags.is_intersection,
            },
        })
        .collect();
    let s = Scenario {
        horizon,
        tracks,
        lanes,
        drivable_polygons: w.drivable_polygons.iter().map(|r| open_ring(r)).collect(),
        obstacle_polygons: w.obstacle_polygons.iter().map(|r| open_ring(r)).collect(),
        frame: w.frame.unwrap_or_default(),
    };
    s.validate().map_err(|e| match e {
        DspError::InvalidScenario(m) => DspError::parse("scenario", m),
        other => other,
    })?;
    Ok(s)
}

pub fn scenario_to_string(s: &Scenario) -> String {
    serde_json::to_string_pretty(&to_wire(s)).expect("scenario serializes")
}

pub fn scenario_from_str(text: &str) -> Result<Scenario> {
    let probe: VersionProbe = serde_json::from_str(text).map_err(json_err)?;
    match probe.schema_version {
        Some(SCHEMA_VERSION) => {}
        Some(found) => {
            return Err(DspError::SchemaVersionMismatch {
                found,
                expected: SCHEMA_VERSION,
            })
        }
        None => return Err(DspError::parse("schema_version", "missing")),
    }
    let wire: ScenarioWire = serde_json::from_str(text).map_err(json_err)?;
    from_wire(wire)
}

pub fn write_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, scenario_to_string(s)).map_err(|e| DspError::io(path, e))
}

pub fn read_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DspError::io(path, e))?;
    scenario_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::samples::simple_scenario;
    use crate::scenario::normalize_to_target;

    #[test]
    fn round_trip_is_lossless() {
        let s = normalize_to_target(&simple_scenario()).unwrap();
        let text = scenario_to_string(&s);
        let back = scenario_from_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(scenario_to_string(&back), text);
    }

    #[test]
    fn short_track_names_the_track() {
        let mut s = simple_scenario();
        s.tracks[1].states.remove(0);
        let err = scenario_from_str(&scenario_to_string(&s)).unwrap_err();
        match err {
            DspError::Parse { field, message, .. } => {
                assert_eq!(field, "tracks[1].states");
                assert!(message.contains("'other'"), "{message}");
                assert!(message.contains("19"), "{message}");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn schema_mismatch_and_json_errors() {
        let text = scenario_to_string(&simple_scenario()).replacen(
            "\"schema_version\": 1",
            "\"schema_version\": 2",
            1,
        );
        assert!(matches!(
            scenario_from_str(&text),
            Err(DspError::SchemaVersionMismatch { found: 2, .. })
        ));
        let err = scenario_from_str("{\"schema_version\": 1,\n \"horizon\": 3}").unwrap_err();
        assert!(matches!(err, DspError::Parse { line: Some(2), .. }), "{err}");
    }

    #[test]
    fn unknown_fields_are_ignored() {
        let golden = r#"{
  "schema_version": 1,
  "producer": "some future tool",
  "horizon": {"T": 2, "H": 1, "dt": 0.1, "units": "s"},
  "tracks": [
    {"id": "ego", "is_target": true, "color": "red",
     "states": [[-1.0, 0.0, 1.0, 0.0, 0], [0.0, 0.0, 1.0, 0.0, 0]],
     "gt_future": [[1.0, 0.0]]}
  ],
  "lanes": [
    {"id": "a", "centerline": [[-5.0, 0.0], [5.0, 0.0]], "speed_limit": 13.9,
     "predecessors": [], "successors": [], "left_neighbor": [], "right_neighbor": [],
     "flags": {"turn_left": false, "turn_right": false, "traffic_control": true,
               "is_intersection": false, "stop_line": true}}
  ],
  "drivable_polygons": [[[-6.0, -2.0], [6.0, -2.0], [6.0, 2.0], [-6.0, 2.0], [-6.0, -2.0]]],
  "obstacle_polygons": [],
  "weather": {"rain": 0.0}
}"#;
        let s = scenario_from_str(golden).unwrap();
        assert_eq!(s.tracks[0].states.len(), 2);
        assert!(s.lanes[0].flags.traffic_control);
        assert_eq!(s.drivable_polygons[0].ring.len(), 4);
    }
}
