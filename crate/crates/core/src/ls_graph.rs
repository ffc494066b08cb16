//! Lane-segment (LS) layer: resampled centerline segments with typed
//! adjacency, dilated predecessor/successor relations, and the distance-based
//! edges linking the LS layer with the DA layer and the agents.

use crate::da_graph::DaGraph;
use crate::error::{DspError, Result};
use crate::geometry::{cumulative_lengths, point_at_arclength, Vec2};
use crate::scenario::{AgentTrack, LaneFlags, Scenario};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};

/// Dimension of the LS node input feature: position, tangent, four flags.
pub const LS_FEATURE_DIM: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LsConfig {
    /// Target arc length of a segment, meters.
    pub seg_len: f64,
    /// Number of dilation levels; level `l` relates nodes `2^l` hops apart.
    pub dilation_levels: usize,
}

impl Default for LsConfig {
    fn default() -> Self {
        LsConfig {
            seg_len: 2.0,
            dilation_levels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsNode {
    pub index: usize,
    pub lane: usize,
    pub lane_id: String,
    /// Segment position within its lane.
    pub seq: usize,
    pub position: Vec2,
    pub tangent: Vec2,
    pub flags: LaneFlags,
}

impl LsNode {
    pub fn features(&self) -> [f64; LS_FEATURE_DIM] {
        let f = self.flags.to_array();
        [
            self.position.x,
            self.position.y,
            self.tangent.x,
            self.tangent.y,
            f[0],
            f[1],
            f[2],
            f[3],
        ]
    }
}

/// Sparse boolean relation stored as sorted `(receiver, sender)` pairs:
/// `(i, j)` means node `j` stands in this relation to node `i`
/// (e.g. for `suc`, `j` is a successor of `i`).
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Relation {
    pub n: usize,
    pub pairs: Vec<(usize, usize)>,
}

impl Relation {
    pub fn from_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let set: BTreeSet<(usize, usize)> = pairs.into_iter().collect();
        Relation {
            n,
            pairs: set.into_iter().collect(),
        }
    }

    pub fn transpose(&self) -> Relation {
        Relation::from_pairs(self.n, self.pairs.iter().map(|&(i, j)| (j, i)))
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        let mut rows = vec![Vec::new(); self.n];
        for &(i, j) in &self.pairs {
            rows[i].push(j);
        }
        rows
    }

    /// Boolean product: `(i, k)` iff some `j` has `(i, j)` in self and `(j, k)` in other.
    pub fn compose(&self, other: &Relation) -> Relation {
        let rows = other.rows();
        let mut out = BTreeSet::new();
        for &(i, j) in &self.pairs {
            for &k in &rows[j] {
                out.insert((i, k));
            }
        }
        Relation {
            n: self.n,
            pairs: out.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsGraph {
    pub nodes: Vec<LsNode>,
    pub pre: Relation,
    pub suc: Relation,
    pub left: Relation,
    pub right: Relation,
    /// `dilated_pre[l]` relates nodes `2^l` predecessor hops apart.
    pub dilated_pre: Vec<Relation>,
    pub dilated_suc: Vec<Relation>,
    pub seg_len: f64,
}

impl LsGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    pub fn input_features(&self) -> Vec<f64> {
        self.nodes.iter().flat_map(|n| n.features()).collect()
    }

    pub fn debug_dump(&self) -> String {
        #[derive(Serialize)]
        struct NodeDump<'a> {
            index: usize,
            lane_id: &'a str,
            seq: usize,
            features: [f64; LS_FEATURE_DIM],
        }
        #[derive(Serialize)]
        struct Dump<'a> {
            seg_len: f64,
            nodes: Vec<NodeDump<'a>>,
            pre: &'a [(usize, usize)],
            suc: &'a [(usize, usize)],
            left: &'a [(usize, usize)],
            right: &'a [(usize, usize)],
            dilated_pre: Vec<&'a [(usize, usize)]>,
            dilated_suc: Vec<&'a [(usize, usize)]>,
        }
        let dump = Dump {
            seg_len: self.seg_len,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDump {
                    index: n.index,
                    lane_id: &n.lane_id,
                    seq: n.seq,
                    features: n.features(),
                })
                .collect(),
            pre: &self.pre.pairs,
            suc: &self.suc.pairs,
            left: &self.left.pairs,
            right: &self.right.pairs,
            dilated_pre: self.dilated_pre.iter().map(|r| r.pairs.as_slice()).collect(),
            dilated_suc: self.dilated_suc.iter().map(|r| r.pairs.as_slice()).collect(),
        };
        serde_json::to_string_pretty(&dump).expect("dump serializes")
    }
}

/// Splits a centerline into arc-length pieces of at most `seg_len`:
/// returns (midpoint, unit tangent, midpoint arc length) per piece.
pub fn resample_centerline(centerline: &[Vec2], seg_len: f64) -> Vec<(Vec2, Vec2, f64)> {
    let cum = cumulative_lengths(centerline);
    let total = *cum.last().unwrap_or(&0.0);
    let count = ((total / seg_len) - 1e-9).ceil().max(1.0) as usize;
    (0..count)
        .map(|k| {
            let a = k as f64 * seg_len;
            let b = ((k + 1) as f64 * seg_len).min(total);
            let mid = 0.5 * (a + b);
            let (pos, tangent_at_mid) = point_at_arclength(centerline, &cum, mid);
            let (pa, _) = point_at_arclength(centerline, &cum, a);
            let (pb, _) = point_at_arclength(centerline, &cum, b);
            let tangent = (pb - pa).normalized().unwrap_or(tangent_at_mid);
            (pos, tangent, mid)
        })
        .collect()
}

pub fn build_ls_graph(s: &Scenario, cfg: &LsConfig) -> Result<LsGraph> {
    if s.lanes.is_empty() {
        return Err(DspError::EmptyMap);
    }
    if !(cfg.seg_len > 0.0) {
        return Err(DspError::InvalidConfig(format!("seg_len must be positive, got {}", cfg.seg_len)));
    }
    let mut nodes = Vec::new();
    // per lane: index range of its segments
    let mut spans = Vec::with_capacity(s.lanes.len());
    for (li, lane) in s.lanes.iter().enumerate() {
        let start = nodes.len();
        for (seq, (position, tangent, _)) in resample_centerline(&lane.centerline, cfg.seg_len)
            .into_iter()
            .enumerate()
        {
            nodes.push(LsNode {
                index: nodes.len(),
                lane: li,
                lane_id: lane.id.clone(),
                seq,
                position,
                tangent,
                flags: lane.flags,
            });
        }
        spans.push(start..nodes.len());
    }
    let n = nodes.len();
    let index: HashMap<&str, usize> = s.lanes.iter().enumerate().map(|(i, l)| (l.id.as_str(), i)).collect();
    let lookup = |id: &str| -> Result<usize> {
        index
            .get(id)
            .copied()
            .ok_or_else(|| DspError::InvalidScenario(format!("unknown lane reference '{id}'")))
    };

    let mut suc = Vec::new();
    for (li, lane) in s.lanes.iter().enumerate() {
        let span = spans[li].clone();
        for i in span.start..span.end.saturating_sub(1) {
            suc.push((i, i + 1));
        }
        let last = span.end - 1;
        for next in &lane.successors {
            let ns = &spans[lookup(next)?];
            suc.push((last, ns.start));
        }
        // predecessor lists are folded in too, so one-sided topology still links
        for prev in &lane.predecessors {
            let ps = &spans[lookup(prev)?];
            suc.push((ps.end - 1, span.start));
        }
    }
    let suc = Relation::from_pairs(n, suc);
    let pre = suc.transpose();

    let lateral = |which: fn(&crate::scenario::LanePolyline) -> &Vec<String>| -> Result<Relation> {
        let mut pairs = Vec::new();
        for (li, lane) in s.lanes.iter().enumerate() {
            for other in which(lane) {
                let os = spans[lookup(other)?].clone();
                for i in spans[li].clone() {
                    let seq = nodes[i].seq;
                    let mut best: Option<(f64, usize)> = None;
                    for j in os.clone() {
                        if nodes[j].seq.abs_diff(seq) > 1 {
                            continue;
                        }
                        let d = nodes[i].position.dist_sq(nodes[j].position);
                        if best.is_none_or(|(bd, _)| d < bd) {
                            best = Some((d, j));
                        }
                    }
                    if let Some((_, j)) = best {
                        pairs.push((i, j));
                    }
                }
            }
        }
        Ok(Relation::from_pairs(n, pairs))
    };
    let left = lateral(|l| &l.left_neighbor)?;
    let right = lateral(|l| &l.right_neighbor)?;

    let dilated_suc = dilated_relations(&suc, cfg.dilation_levels);
    let dilated_pre = dilated_relations(&pre, cfg.dilation_levels);
    Ok(LsGraph {
        nodes,
        pre,
        suc,
        left,
        right,
        dilated_pre,
        dilated_suc,
        seg_len: cfg.seg_len,
    })
}

/// Exact `2^l`-hop relations for `l` in `[0, levels)` by repeated boolean squaring.
pub fn dilated_relations(base: &Relation, levels: usize) -> Vec<Relation> {
    let mut out: Vec<Relation> = Vec::with_capacity(levels);
    for l in 0..levels {
        let next = if l == 0 {
            base.clone()
        } else {
            let prev = &out[l - 1];
            prev.compose(prev)
        };
        out.push(next);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterLayerConfig {
    /// DA <-> LS radius.
    pub r_da_ls: f64,
    /// agent <-> LS radius.
    pub r_agent_ls: f64,
    /// DA -> agent radius.
    pub r_da_agent: f64,
    /// agent -> agent radius.
    pub r_agent_agent: f64,
}

impl Default for InterLayerConfig {
    fn default() -> Self {
        InterLayerConfig {
            r_da_ls: 2.0,
            r_agent_ls: 10.0,
            r_da_agent: 6.0,
            r_agent_agent: 30.0,
        }
    }
}

/// Directed `(source, target)` pairs with the radius that produced them.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EdgeList {
    pub radius: f64,
    pub pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct InterLayerEdges {
    pub da_to_ls: EdgeList,
    pub ls_to_da: EdgeList,
    pub agent_to_ls: EdgeList,
    pub ls_to_agent: EdgeList,
    pub da_to_agent: EdgeList,
    pub agent_to_agent: EdgeList,
}

/// Agents are anchored at their current (t = 0) position.
pub fn agent_anchors(tracks: &[AgentTrack]) -> Vec<Vec2> {
    tracks.iter().map(|t| t.current().pos).collect()
}

/// All `(i, j)` with `|src[i] - dst[j]| <= radius`, sorted; empty when `radius <= 0`.
pub fn radius_pairs(src: &[Vec2], dst: &[Vec2], radius: f64) -> Vec<(usize, usize)> {
    if !(radius > 0.0) || src.is_empty() || dst.is_empty() {
        return Vec::new();
    }
    // bucket destinations on a grid with cell size = radius
    let cell = |p: Vec2| ((p.x / radius).floor() as i64, (p.y / radius).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (j, p) in dst.iter().enumerate() {
        buckets.entry(cell(*p)).or_default().push(j);
    }
    let r_sq = radius * radius;
    let mut out = Vec::new();
    for (i, p) in src.iter().enumerate() {
        let (cx, cy) = cell(*p);
        let mut hits = Vec::new();
        for gy in cy - 1..=cy + 1 {
            for gx in cx - 1..=cx + 1 {
                if let Some(b) = buckets.get(&(gx, gy)) {
                    hits.extend(b.iter().copied().filter(|&j| dst[j].dist_sq(*p) <= r_sq));
                }
            }
        }
        hits.sort_unstable();
        out.extend(hits.into_iter().map(|j| (i, j)));
    }
    out
}

pub fn build_interlayer_edges(
    da: &DaGraph,
    ls: &LsGraph,
    tracks: &[AgentTrack],
    cfg: &InterLayerConfig,
) -> InterLayerEdges {
    let da_pos = da.positions();
    let ls_pos = ls.positions();
    let agents = agent_anchors(tracks);
    let list = |src: &[Vec2], dst: &[Vec2], r: f64| EdgeList {
        radius: r,
        pairs: radius_pairs(src, dst, r),
    };
    let mut agent_to_agent = list(&agents, &agents, cfg.r_agent_agent);
    agent_to_agent.pairs.retain(|(i, j)| i != j);
    InterLayerEdges {
        da_to_ls: list(&da_pos, &ls_pos, cfg.r_da_ls),
        ls_to_da: list(&ls_pos, &da_pos, cfg.r_da_ls),
        agent_to_ls: list(&agents, &ls_pos, cfg.r_agent_ls),
        ls_to_agent: list(&ls_pos, &agents, cfg.r_agent_ls),
        da_to_agent: list(&da_pos, &agents, cfg.r_da_agent),
        agent_to_agent,
    }
}
