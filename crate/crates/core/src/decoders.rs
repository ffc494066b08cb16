//! Heatmap-to-goal decoders: learned multi-header attention decoder, greedy
//! suppression with a decaying radius, and score-weighted k-means.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::da_graph::{nearest_node, DaGraph};
use crate::error::{DspError, Result};
use crate::geometry::Vec2;
use crate::network::{mlp2, register_mlp2, Model, NetConfig, Reg, SceneInputs, SceneVars, COORD_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Nn,
    Nms,
    Kmeans,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::Nn, DecoderKind::Nms, DecoderKind::Kmeans];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::Nn => "nn",
            DecoderKind::Nms => "nms",
            DecoderKind::Kmeans => "kmeans",
        }
    }
}

impl std::fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoalSet {
    pub goals: Vec<Vec2>,
    /// Heatmap value at the node nearest each goal.
    pub scores: Vec<f64>,
    /// Learned decoder only: one row of candidate weights per header.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub header_assignments: Option<Vec<Vec<f64>>>,
}

impl GoalSet {
    pub fn len(&self) -> usize {
        self.goals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goals.is_empty()
    }

    /// Scores normalized to sum to 1; uniform when all scores are zero.
    pub fn probabilities(&self) -> Vec<f64> {
        normalize(&self.scores)
    }
}

pub(crate) fn normalize(w: &[f64]) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    if s > 0.0 {
        w.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / w.len().max(1) as f64; w.len()]
    }
}

/// Indices of the `k` highest scores, descending; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Heatmap value at the nearest DA node of each goal.
pub fn score_goals(heatmap: &[f64], positions: &[Vec2], goals: &[Vec2]) -> Result<Vec<f64>> {
    goals
        .iter()
        .map(|&g| nearest_node(positions, g).map(|i| heatmap[i]).ok_or(DspError::EmptyGraph))
        .collect()
}

fn check_heatmap(heatmap: &[f64], da: &DaGraph) -> Result<()> {
    if heatmap.len() != da.len() {
        return Err(DspError::shape(
            "decoder",
            format!("{} heatmap values for {} nodes", heatmap.len(), da.len()),
        ));
    }
    if da.is_empty() {
        return Err(DspError::EmptyGraph);
    }
    Ok(())
}

// ---------------------------------------------------------------- learned decoder

pub(crate) fn register_nn_decoder(r: &mut Reg, cfg: &NetConfig) -> Result<()> {
    register_mlp2(r, "dec.emb", cfg.d_da + 3, cfg.d_dec, cfg.d_dec)?;
    r.linear("dec.q", cfg.d_dec, cfg.d_dec, false)?;
    r.linear("dec.k", cfg.d_dec, cfg.d_dec, false)?;
    r.linear("dec.v", cfg.d_dec, cfg.d_dec, false)?;
    r.norm("dec.att_n", cfg.d_dec)?;
    for m in 0..cfg.m_headers {
        register_mlp2(r, &format!("dec.h{m}"), cfg.d_dec, cfg.d_dec, 1)?;
    }
    Ok(())
}

/// Tape handles of the learned decoder.
#[derive(Debug, Clone)]
pub struct NnDecoderVars {
    /// `M x 2`.
    pub goals: Var,
    /// `M x K`, rows sum to 1.
    pub gamma: Var,
    pub candidates: Vec<usize>,
}

/// Learned decoder on an existing forward pass. The discrete candidate selection is
/// not differentiated through; the selected scores enter as ordinary inputs.
pub fn nn_decoder_vars(model: &Model, t: &mut Tape, s: &SceneInputs, v: &SceneVars) -> Result<NnDecoderVars> {
    let heat = t.value(v.heatmap).data.clone();
    check_heatmap(&heat, &s.da)?;
    let cands = top_k(&heat, model.cfg.k_sel);
    let k = cands.len();
    let mut coords = Tensor::zeros(k, 2);
    let mut pos = Tensor::zeros(k, 2);
    for (r, &i) in cands.iter().enumerate() {
        let p = s.da.nodes[i].position;
        coords.data[2 * r] = p.x * COORD_SCALE;
        coords.data[2 * r + 1] = p.y * COORD_SCALE;
        pos.data[2 * r] = p.x;
        pos.data[2 * r + 1] = p.y;
    }
    let mut c = model.ctx(t);
    let rows = Arc::new(cands.iter().map(|&i| Some(i)).collect::<Vec<_>>());
    let feat = c.t.gather(v.da, rows.clone())?;
    let score = c.t.gather(v.heatmap, rows)?;
    let coords = c.t.constant(coords)?;
    let x = c.t.concat_cols(&[feat, score, coords])?;
    let e = mlp2(&mut c, x, "dec.emb")?;

    let q = c.linear(e, "dec.q", false)?;
    let kk = c.linear(e, "dec.k", false)?;
    let vv = c.linear(e, "dec.v", false)?;
    let logits = c.t.matmul_nt(q, kk)?;
    let logits = c.t.scale(logits, 1.0 / (model.cfg.d_dec as f64).sqrt())?;
    let att = c.t.softmax_rows(logits)?;
    let ctx = c.t.matmul(att, vv)?;
    let e = c.t.add(e, ctx)?;
    let e = c.norm(e, "dec.att_n")?;

    let heads = (0..model.cfg.m_headers)
        .map(|m| mlp2(&mut c, e, &format!("dec.h{m}")))
        .collect::<Result<Vec<_>>>()?;
    let logits = c.t.concat_cols(&heads)?;
    let logits = c.t.transpose(logits)?;
    let gamma = c.t.softmax_rows(logits)?;
    let pos = c.t.constant(pos)?;
    let goals = c.t.matmul(gamma, pos)?;
    Ok(NnDecoderVars {
        goals,
        gamma,
        candidates: cands,
    })
}

/// Reads a [`GoalSet`] off the tape.
pub fn nn_goal_set(t: &Tape, s: &SceneInputs, heatmap: &[f64], d: &NnDecoderVars) -> Result<GoalSet> {
    let g = t.value(d.goals);
    let goals: Vec<Vec2> = (0..g.rows).map(|r| Vec2::new(g.at(r, 0), g.at(r, 1))).collect();
    let gm = t.value(d.gamma);
    Ok(GoalSet {
        scores: score_goals(heatmap, &s.da.positions(), &goals)?,
        goals,
        header_assignments: Some((0..gm.rows).map(|r| gm.row(r).to_vec()).collect()),
    })
}

// ---------------------------------------------------------------- suppression

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsConfig {
    pub r_supp: f64,
    pub decay: f64,
    pub m: usize,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            r_supp: 2.8,
            decay: 0.8,
            m: 6,
        }
    }
}

/// Accepted node indices with the radius in force at acceptance.
pub fn nms_select(heatmap: &[f64], positions: &[Vec2], cfg: &NmsConfig) -> Vec<(usize, f64)> {
    let order = top_k(heatmap, heatmap.len());
    if heatmap.len() <= cfg.m {
        return order.into_iter().map(|i| (i, 0.0)).collect();
    }
    let mut accepted: Vec<(usize, f64)> = Vec::with_capacity(cfg.m);
    let mut taken = vec![false; heatmap.len()];
    let mut r = cfg.r_supp;
    while accepted.len() < cfg.m {
        for &i in &order {
            if accepted.len() == cfg.m {
                break;
            }
            if taken[i] {
                continue;
            }
            if accepted.iter().all(|&(a, _)| positions[a].dist(positions[i]) >= r) {
                accepted.push((i, r));
                taken[i] = true;
            }
        }
        r *= cfg.decay;
        if r < 1e-12 {
            r = 0.0;
        }
    }
    accepted
}

pub fn nms_goal_decoder(heatmap: &[f64], da: &DaGraph, cfg: &NmsConfig) -> Result<GoalSet> {
    check_heatmap(heatmap, da)?;
    let sel = nms_select(heatmap, &da.positions(), cfg);
    Ok(GoalSet {
        goals: sel.iter().map(|&(i, _)| da.nodes[i].position).collect(),
        scores: sel.iter().map(|&(i, _)| heatmap[i]).collect(),
        header_assignments: None,
    })
}

// ---------------------------------------------------------------- k-means

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KmeansConfig {
    pub m: usize,
    pub iters: usize,
    pub seed: u64,
    /// Highest-scoring nodes clustered; 0 uses every node.
    pub candidates: usize,
}

impl Default for KmeansConfig {
    fn default() -> Self {
        KmeansConfig {
            m: 6,
            iters: 50,
            seed: 0,
            candidates: 64,
        }
    }
}

/// Weighted within-cluster sum of squares.
pub fn kmeans_objective(points: &[Vec2], weights: &[f64], centroids: &[Vec2]) -> f64 {
    points
        .iter()
        .zip(weights)
        .map(|(p, w)| w * centroids.iter().map(|c| c.dist_sq(*p)).fold(f64::INFINITY, f64::min))
        .sum()
}

fn nearest_centroid(p: Vec2, centroids: &[Vec2]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (j, c) in centroids.iter().enumerate() {
        let d = c.dist_sq(p);
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

fn weighted_pick(rng: &mut ChaCha8Rng, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut x = rng.random_range(0.0..1.0) * total;
    for (i, &wi) in w.iter().enumerate() {
        if wi > 0.0 {
            if x < wi {
                return i;
            }
            x -= wi;
        }
    }
    w.iter().rposition(|&v| v > 0.0).unwrap_or(0)
}

/// Score-weighted Lloyd iterations from seeded k-means++ initialization.
/// Returns the centroids and the objective after seeding and after every iteration.
pub fn weighted_kmeans(points: &[Vec2], weights: &[f64], m: usize, iters: usize, seed: u64) -> (Vec<Vec2>, Vec<f64>) {
    let w = if weights.iter().any(|&v| v > 0.0) {
        weights.to_vec()
    } else {
        vec![1.0; points.len()]
    };
    let positive = w.iter().filter(|&&v| v > 0.0).count();
    if positive <= m {
        let c: Vec<Vec2> = top_k(&w, positive).into_iter().map(|i| points[i]).collect();
        let obj = kmeans_objective(points, &w, &c);
        return (c, vec![obj]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![points[weighted_pick(&mut rng, &w)]];
    while centroids.len() < m {
        let d2: Vec<f64> = points
            .iter()
            .zip(&w)
            .map(|(p, wi)| wi * centroids.iter().map(|c| c.dist_sq(*p)).fold(f64::INFINITY, f64::min))
            .collect();
        let next = if d2.iter().any(|&v| v > 0.0) {
            weighted_pick(&mut rng, &d2)
        } else {
            weighted_pick(&mut rng, &w)
        };
        centroids.push(points[next]);
    }
    let mut history = vec![kmeans_objective(points, &w, &centroids)];
    for _ in 0..iters {
        let mut sum = vec![Vec2::new(0.0, 0.0); m];
        let mut mass = vec![0.0; m];
        for (p, &wi) in points.iter().zip(&w) {
            let j = nearest_centroid(*p, &centroids);
            sum[j] = sum[j] + *p * wi;
            mass[j] += wi;
        }
        let next: Vec<Vec2> = (0..m)
            .map(|j| if mass[j] > 0.0 { sum[j] * (1.0 / mass[j]) } else { centroids[j] })
            .collect();
        let moved = next.iter().zip(&centroids).any(|(a, b)| a != b);
        centroids = next;
        history.push(kmeans_objective(points, &w, &centroids));
        if !moved {
            break;
        }
    }
    (centroids, history)
}

pub fn kmeans_goal_decoder(heatmap: &[f64], da: &DaGraph, cfg: &KmeansConfig) -> Result<GoalSet> {
    check_heatmap(heatmap, da)?;
    let k = if cfg.candidates == 0 { heatmap.len() } else { cfg.candidates };
    let idx = top_k(heatmap, k);
    let points: Vec<Vec2> = idx.iter().map(|&i| da.nodes[i].position).collect();
    let weights: Vec<f64> = idx.iter().map(|&i| heatmap[i]).collect();
    let (goals, _) = weighted_kmeans(&points, &weights, cfg.m, cfg.iters, cfg.seed);
    Ok(GoalSet {
        scores: score_goals(heatmap, &da.positions(), &goals)?,
        goals,
        header_assignments: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use crate::network::{GraphConfig, Model, NetConfig, SceneInputs};
    use crate::scenario::samples::simple_scenario;

    fn grid(n: usize, pitch: f64) -> Vec<Vec2> {
        (0..n * n)
            .map(|i| Vec2::new((i % n) as f64 * pitch, (i / n) as f64 * pitch))
            .collect()
    }

    /// Independent formulation: repeatedly pick the best remaining node that clears the
    /// current radius; when none does, shrink the radius.
    fn nms_oracle(h: &[f64], p: &[Vec2], r0: f64, decay: f64, m: usize) -> Vec<usize> {
        if h.len() <= m {
            let mut all: Vec<usize> = (0..h.len()).collect();
            all.sort_by(|&a, &b| h[b].partial_cmp(&h[a]).unwrap().then(a.cmp(&b)));
            return all;
        }
        let mut out: Vec<usize> = Vec::new();
        let mut r = r0;
        let mut pass_start = true;
        let mut cursor_score = f64::INFINITY;
        let mut cursor_idx = 0usize;
        while out.len() < m {
            // candidates after the cursor in (score desc, index asc) order
            let ok = |j: usize| out.iter().all(|&a| p[a].dist(p[j]) >= r) && !out.contains(&j);
            let after = |j: usize| {
                pass_start || h[j] < cursor_score || (h[j] == cursor_score && j > cursor_idx)
            };
            let mut best: Option<usize> = None;
            for j in 0..h.len() {
                if ok(j) && after(j) {
                    best = match best {
                        Some(b) if h[b] > h[j] || (h[b] == h[j] && b < j) => Some(b),
                        _ => Some(j),
                    };
                }
            }
            match best {
                Some(j) => {
                    out.push(j);
                    pass_start = false;
                    cursor_score = h[j];
                    cursor_idx = j;
                }
                None => {
                    r *= decay;
                    pass_start = true;
                }
            }
        }
        out
    }

    #[test]
    fn nms_matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..100 {
            let pts: Vec<Vec2> = (0..50)
                .map(|_| Vec2::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
                .collect();
            let h: Vec<f64> = (0..50).map(|_| (rng.random_range(0..20) as f64) / 20.0).collect();
            let got: Vec<usize> = nms_select(&h, &pts, &NmsConfig::default()).into_iter().map(|x| x.0).collect();
            assert_eq!(got, nms_oracle(&h, &pts, 2.8, 0.8, 6));
        }
    }

    #[test]
    fn nms_radius_constraint_and_simple_cases() {
        let p = grid(10, 5.0);
        let h: Vec<f64> = (0..100).map(|i| 1.0 - i as f64 / 100.0).collect();
        let sel = nms_select(&h, &p, &NmsConfig::default());
        assert_eq!(sel.iter().map(|x| x.0).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);

        let mut p2 = p.clone();
        p2[1] = p2[0];
        let sel = nms_select(&h, &p2, &NmsConfig::default());
        assert_eq!(sel[0].0, 0);
        assert!(sel.iter().all(|x| x.0 != 1));
        for (k, &(i, r)) in sel.iter().enumerate() {
            for &(j, _) in &sel[..k] {
                assert!(p2[i].dist(p2[j]) >= r);
            }
        }
        assert_eq!(nms_select(&h[..4], &p[..4], &NmsConfig::default()).len(), 4);
    }

    #[test]
    fn kmeans_objective_is_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..30 {
            let pts: Vec<Vec2> = (0..60)
                .map(|_| Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0)))
                .collect();
            let w: Vec<f64> = (0..60).map(|_| rng.random_range(0.0..1.0)).collect();
            let (_, hist) = weighted_kmeans(&pts, &w, 6, 100, seed);
            for pair in hist.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9, "{hist:?}");
            }
        }
    }

    #[test]
    fn kmeans_recovers_separated_clusters() {
        let centres: Vec<Vec2> = (0..6).map(|k| Vec2::new(40.0 * k as f64, (k % 2) as f64 * 40.0)).collect();
        let pitch = 2.0;
        let mut pts = Vec::new();
        for c in &centres {
            for dx in -1..=1 {
                for dy in -1..=1 {
                    pts.push(*c + Vec2::new(dx as f64 * pitch, dy as f64 * pitch));
                }
            }
        }
        let w = vec![1.0; pts.len()];
        for seed in 0..10 {
            let (got, _) = weighted_kmeans(&pts, &w, 6, 100, seed);
            for c in &centres {
                let d = got.iter().map(|g| g.dist(*c)).fold(f64::INFINITY, f64::min);
                assert!(d <= pitch / 2.0, "seed {seed}: {d}");
            }
            let doubled: Vec<f64> = w.iter().map(|v| v * 2.0).collect();
            assert_eq!(weighted_kmeans(&pts, &doubled, 6, 100, seed).0, got);
        }
        let single = weighted_kmeans(&pts, &[&[3.0][..], &vec![0.0; pts.len() - 1]].concat(), 1, 10, 0).0;
        assert_eq!(single, vec![pts[0]]);
    }

    #[test]
    fn top_k_breaks_ties_by_index() {
        assert_eq!(top_k(&[0.5, 0.9, 0.5, 0.9], 3), vec![1, 3, 0]);
    }

    fn tiny_cfg() -> NetConfig {
        NetConfig {
            d_da: 8,
            d_ls: 8,
            d_agt: 8,
            d_dec: 8,
            k_sel: 16,
            ..NetConfig::default()
        }
    }

    #[test]
    fn nn_goals_in_candidate_hull() {
        let s = simple_scenario();
        let inputs = SceneInputs::build(&s, &GraphConfig::default()).unwrap();
        for seed in 0..5 {
            let model = Model::new(tiny_cfg(), seed).unwrap();
            let mut t = Tape::new();
            let v = model.forward(&mut t, &inputs).unwrap();
            let d = nn_decoder_vars(&model, &mut t, &inputs, &v).unwrap();
            let heat = t.value(v.heatmap).data.clone();
            let gs = nn_goal_set(&t, &inputs, &heat, &d).unwrap();
            assert_eq!(gs.len(), 6);
            let cand: Vec<Vec2> = d.candidates.iter().map(|&i| inputs.da.nodes[i].position).collect();
            let hull = convex_hull(&cand);
            for (g, row) in gs.goals.iter().zip(gs.header_assignments.as_ref().unwrap()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(hull.contains(*g) || hull.on_boundary(*g, 1e-9), "{g:?}");
            }
        }
    }

    fn convex_hull(pts: &[Vec2]) -> Polygon {
        let mut p = pts.to_vec();
        p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
        p.dedup();
        let mut lower: Vec<Vec2> = Vec::new();
        for &q in &p {
            while lower.len() >= 2 && (lower[lower.len() - 1] - lower[lower.len() - 2]).cross(q - lower[lower.len() - 2]) <= 0.0 {
                lower.pop();
            }
            lower.push(q);
        }
        let mut upper: Vec<Vec2> = Vec::new();
        for &q in p.iter().rev() {
            while upper.len() >= 2 && (upper[upper.len() - 1] - upper[upper.len() - 2]).cross(q - upper[upper.len() - 2]) <= 0.0 {
                upper.pop();
            }
            upper.push(q);
        }
        lower.pop();
        upper.pop();
        lower.extend(upper);
        Polygon { ring: lower }
    }

    #[test]
    fn one_hot_assignment_returns_candidate() {
        let mut t = Tape::new();
        let gamma = t.constant(Tensor::from_vec(1, 3, vec![0.0, 1.0, 0.0])).unwrap();
        let pos = t.constant(Tensor::from_vec(3, 2, vec![1.0, 2.0, 3.5, -4.25, 0.0, 9.0])).unwrap();
        let g = t.matmul(gamma, pos).unwrap();
        assert_eq!(t.value(g).data, vec![3.5, -4.25]);
    }

    proptest::proptest! {
        #[test]
        fn nms_returns_distinct_nodes_led_by_the_peak(seed in 0u64..5_000, n in 1usize..60) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pos: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random_range(-9.0..9.0), rng.random_range(-9.0..9.0))).collect();
            let heat: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let cfg = NmsConfig::default();
            let picks: Vec<usize> = nms_select(&heat, &pos, &cfg).into_iter().map(|(i, _)| i).collect();
            proptest::prop_assert_eq!(picks.len(), n.min(cfg.m));
            let mut uniq = picks.clone();
            uniq.sort_unstable();
            uniq.dedup();
            proptest::prop_assert_eq!(uniq.len(), picks.len());
            proptest::prop_assert_eq!(picks[0], top_k(&heat, 1)[0]);
        }

        #[test]
        fn kmeans_objective_never_rises(seed in 0u64..5_000, n in 6usize..60) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vec2> = (0..n).map(|_| Vec2::new(rng.random_range(-20.0..20.0), rng.random_range(-20.0..20.0))).collect();
            let w: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
            let (_, history) = weighted_kmeans(&pts, &w, 6, 30, seed);
            for pair in history.windows(2) {
                proptest::prop_assert!(pair[1] <= pair[0] + 1e-12);
            }
        }
    }
}
