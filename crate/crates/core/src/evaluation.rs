//! Inference, displacement metrics, reports and SVG plots.

use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::decoders::{
    kmeans_goal_decoder, nms_goal_decoder, nn_decoder_vars, nn_goal_set, DecoderKind, GoalSet, KmeansConfig, NmsConfig,
};
use crate::error::{DspError, Result};
use crate::geometry::{RigidTransform, Vec2};
use crate::network::{Model, SceneInputs};

/// Final-displacement threshold for a miss, meters.
pub const MISS_THRESHOLD: f64 = 2.0;
pub const PREDICTION_SCHEMA_VERSION: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoderSettings {
    pub kind: DecoderKind,
    #[serde(default)]
    pub nms: NmsConfig,
    #[serde(default)]
    pub kmeans: KmeansConfig,
}

impl DecoderSettings {
    /// `m` goals from every decoder.
    pub fn new(kind: DecoderKind, m: usize) -> Self {
        DecoderSettings {
            kind,
            nms: NmsConfig { m, ..NmsConfig::default() },
            kmeans: KmeansConfig { m, ..KmeansConfig::default() },
        }
    }
}

/// Multi-modal forecast for one scenario, in the target frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub decoder: DecoderKind,
    pub goals: GoalSet,
    /// `M` trajectories of `H` points each.
    pub trajectories: Vec<Vec<Vec2>>,
    /// Sums to 1.
    pub probabilities: Vec<f64>,
    /// Maps target-frame coordinates back to the source frame.
    pub frame: RigidTransform,
    /// Heatmap over the DA nodes, when requested.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heatmap: Option<Vec<f64>>,
}

impl Prediction {
    /// Trajectories mapped back to the source frame.
    pub fn world_trajectories(&self) -> Vec<Vec<Vec2>> {
        self.trajectories
            .iter()
            .map(|tr| tr.iter().map(|&p| self.frame.apply(p)).collect())
            .collect()
    }
}

/// Predictions of one run, serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub schema_version: u64,
    pub decoder: DecoderKind,
    pub scenarios: Vec<String>,
    pub predictions: Vec<Prediction>,
}

impl PredictionSet {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| DspError::parse("predictions", e.to_string()))?;
        std::fs::write(path, text).map_err(|e| DspError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DspError::io(path, e))?;
        let p: PredictionSet =
            serde_json::from_str(&text).map_err(|e| DspError::parse("predictions", e.to_string()))?;
        if p.schema_version != PREDICTION_SCHEMA_VERSION {
            return Err(DspError::SchemaVersionMismatch {
                found: p.schema_version,
                expected: PREDICTION_SCHEMA_VERSION,
            });
        }
        Ok(p)
    }
}

fn rows_to_points(t: &Tensor) -> Vec<Vec<Vec2>> {
    (0..t.rows)
        .map(|r| t.row(r).chunks_exact(2).map(|c| Vec2::new(c[0], c[1])).collect())
        .collect()
}

/// Heatmap, goals and completed trajectories for one scene.
pub fn predict_scene(model: &Model, s: &SceneInputs, settings: &DecoderSettings) -> Result<Prediction> {
    let mut t = Tape::new();
    let v = model.forward(&mut t, s)?;
    let heat = t.value(v.heatmap).data.clone();
    let goals = match settings.kind {
        DecoderKind::Nn => {
            let d = nn_decoder_vars(model, &mut t, s, &v)?;
            nn_goal_set(&t, s, &heat, &d)?
        }
        DecoderKind::Nms => nms_goal_decoder(&heat, &s.da, &settings.nms)?,
        DecoderKind::Kmeans => kmeans_goal_decoder(&heat, &s.da, &settings.kmeans)?,
    };
    let g: Vec<f64> = goals.goals.iter().flat_map(|p| [p.x, p.y]).collect();
    let g = t.constant(Tensor::from_vec(goals.len(), 2, g))?;
    let traj = model.complete_trajectory(&mut t, v.target, g)?;
    let trajectories = rows_to_points(t.value(traj));
    Ok(Prediction {
        decoder: settings.kind,
        probabilities: goals.probabilities(),
        goals,
        trajectories,
        frame: s.scenario.frame,
        heatmap: Some(heat),
    })
}

/// Predictions for many scenes; parallel over scenes, output in input order.
pub fn predict_scenes(model: &Model, scenes: &[SceneInputs], settings: &DecoderSettings) -> Result<Vec<Prediction>> {
    scenes.par_iter().map(|s| predict_scene(model, s, settings)).collect()
}

// ---------------------------------------------------------------- metrics

pub fn ade(pred: &[Vec2], gt: &[Vec2]) -> f64 {
    let n = pred.len().min(gt.len());
    if n == 0 {
        return 0.0;
    }
    pred.iter().zip(gt).map(|(a, b)| a.dist(*b)).sum::<f64>() / n as f64
}

pub fn fde(pred: &[Vec2], gt: &[Vec2]) -> f64 {
    match (pred.last(), gt.last()) {
        (Some(a), Some(b)) => a.dist(*b),
        _ => 0.0,
    }
}

pub fn min_ade(preds: &[Vec<Vec2>], gt: &[Vec2]) -> f64 {
    preds.iter().map(|p| ade(p, gt)).fold(f64::INFINITY, f64::min)
}

pub fn min_fde(preds: &[Vec<Vec2>], gt: &[Vec2]) -> f64 {
    preds.iter().map(|p| fde(p, gt)).fold(f64::INFINITY, f64::min)
}

/// Mode with the smallest final displacement (ties to the lower index).
pub fn best_fde_mode(preds: &[Vec<Vec2>], gt: &[Vec2]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in preds.iter().enumerate() {
        let d = fde(p, gt);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Most probable mode (ties to the lower index).
pub fn argmax_mode(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

/// minFDE plus `(1 - p)^2` of the mode achieving it.
pub fn brier_min_fde(preds: &[Vec<Vec2>], probs: &[f64], gt: &[Vec2]) -> f64 {
    let b = best_fde_mode(preds, gt);
    let p = probs.get(b).copied().unwrap_or(0.0);
    fde(&preds[b], gt) + (1.0 - p) * (1.0 - p)
}

pub fn is_miss(preds: &[Vec<Vec2>], gt: &[Vec2]) -> bool {
    min_fde(preds, gt) > MISS_THRESHOLD
}

/// Per-scenario metrics for one K.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss: bool,
    pub brier_min_fde: f64,
}

/// Metrics over all modes, or over the single most probable one when `k == 1`.
pub fn scene_metrics(preds: &[Vec<Vec2>], probs: &[f64], gt: &[Vec2], k: usize) -> Result<SceneMetrics> {
    if preds.is_empty() || preds.len() != probs.len() {
        return Err(DspError::shape(
            "scene_metrics",
            format!("{} trajectories, {} probabilities", preds.len(), probs.len()),
        ));
    }
    if let Some(p) = preds.iter().find(|p| p.len() != gt.len()) {
        return Err(DspError::shape(
            "scene_metrics",
            format!("trajectory of {} points, ground truth of {}", p.len(), gt.len()),
        ));
    }
    let (preds, probs) = if k == 1 {
        let a = argmax_mode(probs);
        (vec![preds[a].clone()], vec![1.0])
    } else {
        (preds.to_vec(), probs.to_vec())
    };
    Ok(SceneMetrics {
        min_ade: min_ade(&preds, gt),
        min_fde: min_fde(&preds, gt),
        miss: is_miss(&preds, gt),
        brier_min_fde: brier_min_fde(&preds, &probs, gt),
    })
}

/// Averages of [`SceneMetrics`].
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricValues {
    pub min_ade: f64,
    pub min_fde: f64,
    pub miss_rate: f64,
    pub brier_min_fde: f64,
    pub n: usize,
}

impl MetricValues {
    pub fn mean(items: &[SceneMetrics]) -> Self {
        let n = items.len();
        if n == 0 {
            return MetricValues::default();
        }
        let k = 1.0 / n as f64;
        MetricValues {
            min_ade: items.iter().map(|m| m.min_ade).sum::<f64>() * k,
            min_fde: items.iter().map(|m| m.min_fde).sum::<f64>() * k,
            miss_rate: items.iter().filter(|m| m.miss).count() as f64 / n as f64,
            brier_min_fde: items.iter().map(|m| m.brier_min_fde).sum::<f64>() * k,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub k1: MetricValues,
    /// All `M` modes.
    pub k6: MetricValues,
}

fn gt_of(s: &SceneInputs) -> Result<&[Vec2]> {
    s.scenario.tracks[s.target]
        .gt_future
        .as_deref()
        .ok_or(DspError::MissingGtFuture)
}

/// Scores predictions against the scenes' ground truth.
pub fn summarize(scenes: &[SceneInputs], preds: &[Prediction]) -> Result<MetricSummary> {
    if scenes.len() != preds.len() {
        return Err(DspError::shape(
            "summarize",
            format!("{} scenes, {} predictions", scenes.len(), preds.len()),
        ));
    }
    let mut k1 = Vec::with_capacity(scenes.len());
    let mut km = Vec::with_capacity(scenes.len());
    for (s, p) in scenes.iter().zip(preds) {
        let gt = gt_of(s)?;
        k1.push(scene_metrics(&p.trajectories, &p.probabilities, gt, 1)?);
        km.push(scene_metrics(&p.trajectories, &p.probabilities, gt, p.trajectories.len())?);
    }
    Ok(MetricSummary {
        k1: MetricValues::mean(&k1),
        k6: MetricValues::mean(&km),
    })
}

/// Predicts and scores; every scene must carry a ground-truth future.
pub fn evaluate_scenes(model: &Model, scenes: &[SceneInputs], settings: &DecoderSettings) -> Result<MetricSummary> {
    for s in scenes {
        gt_of(s)?;
    }
    let preds = predict_scenes(model, scenes, settings)?;
    summarize(scenes, &preds)
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub split: String,
    pub decoder: DecoderKind,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "minADE")]
    pub min_ade: f64,
    #[serde(rename = "minFDE")]
    pub min_fde: f64,
    #[serde(rename = "MR")]
    pub miss_rate: f64,
    #[serde(rename = "brier_minFDE")]
    pub brier_min_fde: f64,
    pub n_scenarios: usize,
}

pub fn report_rows(split: &str, decoder: DecoderKind, m_modes: usize, s: &MetricSummary) -> Vec<ReportRow> {
    [(1, s.k1), (m_modes, s.k6)]
        .into_iter()
        .map(|(k, v)| ReportRow {
            split: split.to_string(),
            decoder,
            k,
            min_ade: v.min_ade,
            min_fde: v.min_fde,
            miss_rate: v.miss_rate,
            brier_min_fde: v.brier_min_fde,
            n_scenarios: v.n,
        })
        .collect()
}

/// Fixed-width table of report rows.
pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = String::from("split    decoder  K  minADE   minFDE   MR       brier_minFDE  n\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{:<8} {:<8} {:<2} {:<8.4} {:<8.4} {:<8.4} {:<13.4} {}",
            r.split, r.decoder, r.k, r.min_ade, r.min_fde, r.miss_rate, r.brier_min_fde, r.n_scenarios
        );
    }
    out
}

// ---------------------------------------------------------------- plots

struct View {
    min: Vec2,
    scale: f64,
    height: f64,
}

impl View {
    fn px(&self, p: Vec2) -> (f64, f64) {
        ((p.x - self.min.x) * self.scale, self.height - (p.y - self.min.y) * self.scale)
    }

    fn path(&self, pts: &[Vec2]) -> String {
        pts.iter()
            .enumerate()
            .map(|(i, &p)| {
                let (x, y) = self.px(p);
                format!("{}{x:.2},{y:.2}", if i == 0 { "M" } else { " L" })
            })
            .collect()
    }
}

/// Target-frame scene drawing: drivable area, lanes, DA heatmap, history,
/// ground truth and predicted modes.
pub fn plot_svg(s: &SceneInputs, pred: Option<&Prediction>) -> String {
    let half = s.da.extent / 2.0 + s.da.pitch;
    let size = 600.0;
    let v = View {
        min: Vec2::new(-half, -half),
        scale: size / (2.0 * half),
        height: size,
    };
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>\n"
    );
    for poly in &s.scenario.drivable_polygons {
        let _ = writeln!(out, "<path d=\"{} Z\" fill=\"#eeeeee\" stroke=\"#bbbbbb\"/>", v.path(&poly.ring));
    }
    for poly in &s.scenario.obstacle_polygons {
        let _ = writeln!(out, "<path d=\"{} Z\" fill=\"#999999\"/>", v.path(&poly.ring));
    }
    for lane in &s.scenario.lanes {
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"#c8c8ff\" stroke-width=\"1\"/>",
            v.path(&lane.centerline)
        );
    }
    if let Some(h) = pred.and_then(|p| p.heatmap.as_ref()).filter(|h| h.len() == s.da.len()) {
        let r = (s.da.pitch * v.scale * 0.45).max(1.0);
        for (n, &val) in s.da.nodes.iter().zip(h) {
            let (x, y) = v.px(n.position);
            let _ = writeln!(
                out,
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"{r:.2}\" fill=\"#ff6000\" fill-opacity=\"{:.3}\"/>",
                val.clamp(0.0, 1.0)
            );
        }
    }
    for (i, tr) in s.scenario.tracks.iter().enumerate() {
        let hist: Vec<Vec2> = tr.states.iter().filter(|st| !st.pad).map(|st| st.pos).collect();
        let color = if i == s.target { "#0050c8" } else { "#505050" };
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            v.path(&hist)
        );
    }
    if let Some(gt) = &s.scenario.tracks[s.target].gt_future {
        let _ = writeln!(
            out,
            "<path d=\"{}\" fill=\"none\" stroke=\"#00a000\" stroke-width=\"2\" stroke-dasharray=\"4 3\"/>",
            v.path(gt)
        );
    }
    if let Some(p) = pred {
        for (m, tr) in p.trajectories.iter().enumerate() {
            let prob = p.probabilities.get(m).copied().unwrap_or(0.0);
            let _ = writeln!(
                out,
                "<path d=\"{}\" fill=\"none\" stroke=\"#d00000\" stroke-width=\"{:.2}\"/>",
                v.path(tr),
                1.0 + 3.0 * prob
            );
        }
        for &g in &p.goals.goals {
            let (x, y) = v.px(g);
            let _ = writeln!(out, "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"4\" fill=\"#d00000\"/>");
        }
    }
    out.push_str("</svg>\n");
    out
}
