//! Drivable-area (DA) layer: a target-centred grid of freespace nodes with
//! obstacle-aware Moore connectivity, dilated neighbour tables and
//! spatio-temporal occupancy channels.

use crate::error::{DspError, Result};
use crate::geometry::{Polygon, Vec2};
use crate::scenario::Scenario;
use serde::{Deserialize, Serialize};

/// Grid steps for the eight Moore directions, counter-clockwise from +x.
pub const DIRECTIONS: [(i64, i64); 8] = [
    (1, 0),
    (1, 1),
    (0, 1),
    (-1, 1),
    (-1, 0),
    (-1, -1),
    (0, -1),
    (1, -1),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DaConfig {
    /// Grid spacing in meters.
    pub pitch: f64,
    /// Side length of the square sampling window centred on the target, meters.
    pub extent: f64,
    /// Occupancy radius, meters.
    pub r_occ: f64,
    /// Number of dilation levels; level `k` links nodes `2^k` cells apart.
    pub dilation_levels: usize,
}

impl Default for DaConfig {
    fn default() -> Self {
        DaConfig::desk()
    }
}

impl DaConfig {
    pub fn desk() -> Self {
        DaConfig {
            pitch: 2.0,
            extent: 60.0,
            r_occ: 1.5,
            dilation_levels: 4,
        }
    }

    pub fn full() -> Self {
        DaConfig {
            pitch: 1.0,
            extent: 120.0,
            ..DaConfig::desk()
        }
    }

    fn check(&self) -> Result<()> {
        if !(self.pitch > 0.0) || !(self.extent >= 0.0) || !(self.r_occ >= 0.0) {
            return Err(DspError::InvalidConfig(format!("bad DA config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaNode {
    pub index: usize,
    pub position: Vec2,
    pub grid: (i64, i64),
    /// `occ[t]` is set when any unpadded agent is within `r_occ` at step `t`.
    pub occ: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DaGraph {
    pub nodes: Vec<DaNode>,
    /// Symmetric Moore adjacency (sorted per node).
    pub edges: Vec<Vec<usize>>,
    /// `dilated[k][i][d]`: node at grid offset `2^k * DIRECTIONS[d]` from `i`, if linked.
    pub dilated: Vec<Vec<[Option<usize>; 8]>>,
    pub pitch: f64,
    pub extent: f64,
    cells_per_side: usize,
    cell_to_node: Vec<Option<usize>>,
}

impl DaGraph {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn dilation_levels(&self) -> usize {
        self.dilated.len()
    }

    pub fn dilated_neighbor(&self, level: usize, dir: usize, node: usize) -> Option<usize> {
        self.dilated[level][node][dir]
    }

    /// Neighbour sets used by dilation level `level`, in direction order.
    pub fn neighbor_sets(&self, level: usize) -> Vec<Vec<usize>> {
        self.dilated[level]
            .iter()
            .map(|dirs| dirs.iter().flatten().copied().collect())
            .collect()
    }

    pub fn node_at_grid(&self, g: (i64, i64)) -> Option<usize> {
        let n = self.cells_per_side as i64;
        if g.0 < 0 || g.1 < 0 || g.0 >= n || g.1 >= n {
            return None;
        }
        self.cell_to_node[(g.1 * n + g.0) as usize]
    }

    pub fn positions(&self) -> Vec<Vec2> {
        self.nodes.iter().map(|n| n.position).collect()
    }

    /// Row-major input features: `[x, y, occ_0, ..., occ_{T-1}]`.
    pub fn input_features(&self) -> (Vec<f64>, usize) {
        let t = self.nodes.first().map_or(0, |n| n.occ.len());
        let cols = 2 + t;
        let mut out = Vec::with_capacity(self.nodes.len() * cols);
        for n in &self.nodes {
            out.push(n.position.x);
            out.push(n.position.y);
            out.extend(n.occ.iter().map(|&o| if o { 1.0 } else { 0.0 }));
        }
        (out, cols)
    }

    pub fn debug_dump(&self) -> String {
        #[derive(Serialize)]
        struct Dump<'a> {
            pitch: f64,
            extent: f64,
            nodes: Vec<NodeDump>,
            edges: &'a [Vec<usize>],
            dilated: Vec<Vec<Vec<Option<usize>>>>,
        }
        #[derive(Serialize)]
        struct NodeDump {
            index: usize,
            position: [f64; 2],
            grid: [i64; 2],
            occ: String,
        }
        let dump = Dump {
            pitch: self.pitch,
            extent: self.extent,
            nodes: self
                .nodes
                .iter()
                .map(|n| NodeDump {
                    index: n.index,
                    position: n.position.into(),
                    grid: [n.grid.0, n.grid.1],
                    occ: n.occ.iter().map(|&o| if o { '1' } else { '0' }).collect(),
                })
                .collect(),
            edges: &self.edges,
            dilated: self
                .dilated
                .iter()
                .map(|lvl| (0..8).map(|d| lvl.iter().map(|dirs| dirs[d]).collect()).collect())
                .collect(),
        };
        serde_json::to_string_pretty(&dump).expect("dump serializes")
    }
}

/// Obstacles that lie inside the drivable union; others are ignored.
pub fn active_obstacles(s: &Scenario) -> Vec<&Polygon> {
    s.obstacle_polygons
        .iter()
        .filter(|o| {
            o.ring
                .iter()
                .all(|v| s.drivable_polygons.iter().any(|d| d.contains(*v)))
        })
        .collect()
}

pub fn build_da_graph(s: &Scenario, cfg: &DaConfig) -> Result<DaGraph> {
    cfg.check()?;
    let obstacles = active_obstacles(s);
    let cells = (cfg.extent / cfg.pitch).round() as usize + 1;
    let half = cfg.extent / 2.0;
    let pos_of = |gx: i64, gy: i64| Vec2::new(-half + gx as f64 * cfg.pitch, -half + gy as f64 * cfg.pitch);

    let mut nodes = Vec::new();
    let mut cell_to_node = vec![None; cells * cells];
    for gy in 0..cells as i64 {
        for gx in 0..cells as i64 {
            let p = pos_of(gx, gy);
            let free = s.drivable_polygons.iter().any(|d| d.contains(p))
                && !obstacles.iter().any(|o| o.contains(p));
            if free {
                cell_to_node[gy as usize * cells + gx as usize] = Some(nodes.len());
                nodes.push(DaNode {
                    index: nodes.len(),
                    position: p,
                    grid: (gx, gy),
                    occ: Vec::new(),
                });
            }
        }
    }
    if nodes.is_empty() {
        return Err(DspError::EmptyGraph);
    }

    let lookup = |g: (i64, i64)| -> Option<usize> {
        if g.0 < 0 || g.1 < 0 || g.0 >= cells as i64 || g.1 >= cells as i64 {
            None
        } else {
            cell_to_node[g.1 as usize * cells + g.0 as usize]
        }
    };
    let clear = |a: Vec2, b: Vec2| !obstacles.iter().any(|o| o.blocks_segment(a, b));

    let mut dilated = vec![vec![[None; 8]; nodes.len()]; cfg.dilation_levels];
    for (k, level) in dilated.iter_mut().enumerate() {
        let step = 1i64 << k;
        for node in &nodes {
            for (d, (dx, dy)) in DIRECTIONS.iter().enumerate() {
                let g = (node.grid.0 + dx * step, node.grid.1 + dy * step);
                if let Some(j) = lookup(g) {
                    // symmetric: compute once per unordered pair
                    if j < node.index {
                        let back = (d + 4) % 8;
                        level[node.index][d] = level[j][back];
                    } else if clear(node.position, nodes[j].position) {
                        level[node.index][d] = Some(j);
                    }
                }
            }
        }
    }
    let moore = build_moore(&nodes, &lookup, &clear);

    let mut g = DaGraph {
        nodes,
        edges: moore,
        dilated,
        pitch: cfg.pitch,
        extent: cfg.extent,
        cells_per_side: cells,
        cell_to_node,
    };
    let occ = occupancy_features(&g, s, cfg.r_occ);
    for (n, row) in g.nodes.iter_mut().zip(occ) {
        n.occ = row;
    }
    Ok(g)
}

fn build_moore(
    nodes: &[DaNode],
    lookup: &dyn Fn((i64, i64)) -> Option<usize>,
    clear: &dyn Fn(Vec2, Vec2) -> bool,
) -> Vec<Vec<usize>> {
    let mut edges = vec![Vec::new(); nodes.len()];
    for node in nodes {
        for (dx, dy) in DIRECTIONS {
            if let Some(j) = lookup((node.grid.0 + dx, node.grid.1 + dy)) {
                if j > node.index && clear(node.position, nodes[j].position) {
                    edges[node.index].push(j);
                    edges[j].push(node.index);
                }
            }
        }
    }
    for e in &mut edges {
        e.sort_unstable();
    }
    edges
}

/// `occ[i][t]`: whether any unpadded agent lies within `r_occ` of node `i` at step `t`.
pub fn occupancy_features(g: &DaGraph, s: &Scenario, r_occ: f64) -> Vec<Vec<bool>> {
    let t_len = s.horizon.t;
    let mut occ = vec![vec![false; t_len]; g.nodes.len()];
    let half = g.extent / 2.0;
    let reach = (r_occ / g.pitch).ceil() as i64;
    let r_sq = r_occ * r_occ;
    for tr in &s.tracks {
        for (t, st) in tr.states.iter().enumerate().take(t_len) {
            if st.pad {
                continue;
            }
            let cx = ((st.pos.x + half) / g.pitch).round() as i64;
            let cy = ((st.pos.y + half) / g.pitch).round() as i64;
            for gy in cy - reach..=cy + reach {
                for gx in cx - reach..=cx + reach {
                    if let Some(i) = g.node_at_grid((gx, gy)) {
                        if g.nodes[i].position.dist_sq(st.pos) <= r_sq {
                            occ[i][t] = true;
                        }
                    }
                }
            }
        }
    }
    occ
}

/// Closest node to `p`; ties go to the lowest index.
pub fn nearest_da_node(g: &DaGraph, p: Vec2) -> Result<usize> {
    nearest_node(&g.positions(), p).ok_or(DspError::EmptyGraph)
}

pub(crate) fn nearest_node(positions: &[Vec2], p: Vec2) -> Option<usize> {
    let mut best: Option<(f64, usize)> = None;
    for (i, q) in positions.iter().enumerate() {
        let d = q.dist_sq(p);
        if best.is_none_or(|(bd, _)| d < bd) {
            best = Some((d, i));
        }
    }
    best.map(|(_, i)| i)
}
