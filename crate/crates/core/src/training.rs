//! Losses, goal labels and the training loop.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, Checkpoint, ParamStore, Reduction, Tape, Tensor, Var};
use crate::da_graph::DaGraph;
use crate::decoders::{nn_decoder_vars, DecoderKind};
use crate::error::{DspError, Result};
use crate::evaluation::{evaluate_scenes, DecoderSettings, MetricSummary};
use crate::geometry::Vec2;
use crate::network::{GraphConfig, Model, NetConfig, SceneInputs};
use crate::scenario::{augment, Scenario};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub omega1: f64,
    pub omega2: f64,
    pub focal_alpha: f64,
    pub focal_beta: f64,
    /// Nodes closer than this to the ground-truth goal are positives, meters.
    pub pos_radius: f64,
    /// Width of the soft label kernel, meters.
    pub sigma_label: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    /// First epoch of the linear decay towards `lr_end`.
    pub decay_start: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub augment: bool,
    /// Evaluate on the held-out split every this many epochs (and after the last one).
    pub eval_every: usize,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            omega1: 0.8,
            omega2: 0.8,
            focal_alpha: 2.0,
            focal_beta: 4.0,
            pos_radius: 1.0,
            sigma_label: 2.0,
            lr_start: 1e-3,
            lr_end: 1e-4,
            epochs: 30,
            decay_start: 25,
            batch_size: 1,
            seed: 0,
            augment: true,
            eval_every: 5,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |w: f64| w > 0.0 && w < 1.0;
        let ok = (in_unit(self.omega1) || self.omega1 == 1.0)
            && (in_unit(self.omega2) || self.omega2 == 1.0)
            && self.focal_alpha > 0.0
            && self.focal_beta > 0.0
            && self.sigma_label > 0.0
            && self.batch_size > 0
            && self.eval_every > 0
            && self.lr_start > 0.0
            && self.lr_end > 0.0;
        if ok {
            Ok(())
        } else {
            Err(DspError::InvalidConfig(format!("bad training config {self:?}")))
        }
    }

    /// Constant `lr_start`, then linear steps reaching `lr_end` at the final epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch < self.decay_start || self.epochs <= self.decay_start {
            return self.lr_start;
        }
        let span = (self.epochs - self.decay_start) as f64;
        let f = ((epoch - self.decay_start + 1) as f64 / span).min(1.0);
        self.lr_start + (self.lr_end - self.lr_start) * f
    }
}

/// 1 inside `pos_radius` of the goal, else a Gaussian of the distance.
pub fn goal_labels(da: &DaGraph, gt_goal: Vec2, cfg: &TrainConfig) -> Vec<f64> {
    da.nodes
        .iter()
        .map(|n| {
            let d = n.position.dist(gt_goal);
            if d < cfg.pos_radius {
                1.0
            } else {
                (-d * d / (2.0 * cfg.sigma_label * cfg.sigma_label)).exp()
            }
        })
        .collect()
}

pub fn goal_classification_loss(t: &mut Tape, heatmap: Var, labels: Arc<Vec<f64>>, cfg: &TrainConfig) -> Result<Var> {
    if !labels.contains(&1.0) {
        log::warn!("goal labels contain no positive node; normalizing by 1");
    }
    t.focal_loss(heatmap, labels, cfg.focal_alpha, cfg.focal_beta)
}

/// Index of the goal row closest to `gt` (ties to the lower index).
pub fn winner(goals: &Tensor, gt: Vec2) -> usize {
    let mut best = (f64::INFINITY, 0);
    for r in 0..goals.rows {
        let d = Vec2::new(goals.at(r, 0), goals.at(r, 1)).dist(gt);
        if d < best.0 {
            best = (d, r);
        }
    }
    best.1
}

/// Summed smooth-L1 between `gt` and the winning goal row only.
pub fn goal_regression_loss(t: &mut Tape, goals: Var, gt: Vec2) -> Result<(Var, usize)> {
    let m = winner(t.value(goals), gt);
    let row = t.gather(goals, Arc::new(vec![Some(m)]))?;
    let target = Arc::new(Tensor::from_vec(1, 2, vec![gt.x, gt.y]));
    Ok((t.smooth_l1(row, target, Reduction::Sum)?, m))
}

/// Mean smooth-L1 over all `H x 2` entries of a flattened `1 x 2H` trajectory.
pub fn trajectory_regression_loss(t: &mut Tape, traj: Var, gt: &[Vec2]) -> Result<Var> {
    let data: Vec<f64> = gt.iter().flat_map(|p| [p.x, p.y]).collect();
    let target = Arc::new(Tensor::from_vec(1, data.len(), data));
    t.smooth_l1(traj, target, Reduction::Mean)
}

/// `w1 * (w2 * gc + (1 - w2) * gr) + (1 - w1) * tr`.
pub fn total_loss(t: &mut Tape, gc: Var, gr: Var, tr: Var, cfg: &TrainConfig) -> Result<Var> {
    let a = t.scale(gc, cfg.omega2)?;
    let b = t.scale(gr, 1.0 - cfg.omega2)?;
    let goal = t.add(a, b)?;
    let goal = t.scale(goal, cfg.omega1)?;
    let traj = t.scale(tr, 1.0 - cfg.omega1)?;
    t.add(goal, traj)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub gc: f64,
    pub gr: f64,
    pub tr: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.gc += o.gc;
        self.gr += o.gr;
        self.tr += o.tr;
        self.total += o.total;
    }

    fn scaled(&self, k: f64) -> LossBreakdown {
        LossBreakdown {
            gc: self.gc * k,
            gr: self.gr * k,
            tr: self.tr * k,
            total: self.total * k,
        }
    }
}

/// Handles of the full training objective on one scene.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub gc: Var,
    pub gr: Var,
    pub tr: Var,
    pub total: Var,
}

/// Records the objective with the ground-truth goal fed to completion.
pub fn scene_loss(model: &Model, t: &mut Tape, s: &SceneInputs, cfg: &TrainConfig) -> Result<LossVars> {
    let target = &s.scenario.tracks[s.target];
    let gt = target.gt_future.as_ref().ok_or(DspError::MissingGtFuture)?;
    let gt_goal = *gt.last().ok_or(DspError::MissingGtFuture)?;
    if gt.len() != model.cfg.h_pred {
        return Err(DspError::shape(
            "scene_loss",
            format!("{} future steps, model predicts {}", gt.len(), model.cfg.h_pred),
        ));
    }
    let v = model.forward(t, s)?;
    let labels = Arc::new(goal_labels(&s.da, gt_goal, cfg));
    let gc = goal_classification_loss(t, v.heatmap, labels, cfg)?;
    let dec = nn_decoder_vars(model, t, s, &v)?;
    let (gr, _) = goal_regression_loss(t, dec.goals, gt_goal)?;
    let g = t.constant(Tensor::from_vec(1, 2, vec![gt_goal.x, gt_goal.y]))?;
    let traj = model.complete_trajectory(t, v.target, g)?;
    let tr = trajectory_regression_loss(t, traj, gt)?;
    let total = total_loss(t, gc, gr, tr, cfg)?;
    Ok(LossVars { gc, gr, tr, total })
}

/// Forward and backward on one scene; gradients are added into `grads`.
pub fn accumulate_scene_grads(model: &Model, s: &SceneInputs, cfg: &TrainConfig, grads: &mut ParamStore) -> Result<LossBreakdown> {
    let mut t = Tape::new();
    let l = scene_loss(model, &mut t, s, cfg)?;
    let out = LossBreakdown {
        gc: t.value(l.gc).item(),
        gr: t.value(l.gr).item(),
        tr: t.value(l.tr).item(),
        total: t.value(l.total).item(),
    };
    if !out.total.is_finite() {
        return Err(DspError::NonFiniteValue("training loss".into()));
    }
    let g = t.backward(l.total)?;
    t.accumulate_param_grads(&g, grads);
    Ok(out)
}

/// Per-epoch training record; also the JSONL log line format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub steps: u64,
    pub train_loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval: Option<MetricSummary>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub records: Vec<EpochRecord>,
    pub best_brier: Option<f64>,
}

/// Output locations; all optional so tests can train in memory.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs {
    pub log: Option<PathBuf>,
    /// Checkpoint with the best held-out Brier-minFDE.
    pub best: Option<PathBuf>,
    /// Checkpoint written after every epoch (resume point).
    pub last: Option<PathBuf>,
}

/// Resume metadata stored in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct ResumeMeta {
    epochs_done: usize,
    best_brier: Option<f64>,
    net: NetConfig,
}

pub fn checkpoint_meta(model: &Model, epochs_done: usize, best_brier: Option<f64>) -> BTreeMap<String, serde_json::Value> {
    let meta = ResumeMeta {
        epochs_done,
        best_brier,
        net: model.cfg,
    };
    let mut m = BTreeMap::new();
    m.insert(
        "train".to_string(),
        serde_json::to_value(meta).expect("resume metadata serializes"),
    );
    m
}

/// Restores a model and the number of completed epochs from a checkpoint.
pub fn load_model(path: &Path) -> Result<(Model, usize, Option<f64>)> {
    let ck = Checkpoint::load(path)?;
    let params = ParamStore::from_checkpoint(&ck)?;
    let meta: ResumeMeta = ck
        .meta
        .get("train")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| DspError::parse("checkpoint.meta.train", e.to_string()))?
        .ok_or_else(|| DspError::parse("checkpoint.meta.train", "missing network configuration"))?;
    let fresh = Model::new(meta.net, params.init_seed())?;
    if fresh.params.names() != params.names() {
        return Err(DspError::parse("checkpoint.params", "parameter names do not match the network"));
    }
    Ok((
        Model {
            cfg: meta.net,
            params,
        },
        meta.epochs_done,
        meta.best_brier,
    ))
}

fn step_seed(seed: u64, epoch: usize, pos: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | pos as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Training scenes: cached graphs when augmentation is off, rebuilt per step otherwise.
pub struct TrainSet {
    scenes: Vec<Scenario>,
    cached: Option<Vec<SceneInputs>>,
    graphs: GraphConfig,
}

impl TrainSet {
    pub fn new(scenes: Vec<Scenario>, graphs: GraphConfig, augment: bool) -> Result<Self> {
        let cached = if augment {
            None
        } else {
            Some(scenes.iter().map(|s| SceneInputs::build(s, &graphs)).collect::<Result<_>>()?)
        };
        Ok(TrainSet { scenes, cached, graphs })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    fn inputs(&self, i: usize, seed: u64) -> Result<std::borrow::Cow<'_, SceneInputs>> {
        match &self.cached {
            Some(c) => Ok(std::borrow::Cow::Borrowed(&c[i])),
            None => Ok(std::borrow::Cow::Owned(SceneInputs::build(&augment(&self.scenes[i], seed), &self.graphs)?)),
        }
    }
}

/// Runs epochs `start_epoch..cfg.epochs`, updating `model` in place.
pub fn train(
    model: &mut Model,
    train_set: &TrainSet,
    eval_set: &[SceneInputs],
    cfg: &TrainConfig,
    start_epoch: usize,
    best_so_far: Option<f64>,
    out: &TrainOutputs,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DspError::InvalidConfig("empty training set".into()));
    }
    let mut log = match &out.log {
        Some(p) => Some(
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(p)
                .map_err(|e| DspError::io(p, e))?,
        ),
        None => None,
    };
    let mut best = best_so_far;
    let mut records = Vec::new();
    let mut grads = model.params.clone();
    for epoch in start_epoch..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(step_seed(cfg.seed, epoch, usize::MAX)));
        let mut sum = LossBreakdown::default();
        for batch in order.chunks(cfg.batch_size) {
            grads.zero_grads();
            let mut batch_loss = LossBreakdown::default();
            for &i in batch {
                let s = train_set.inputs(i, step_seed(cfg.seed, epoch, i))?;
                batch_loss.add(&accumulate_scene_grads(model, &s, cfg, &mut grads)?);
            }
            let k = 1.0 / batch.len() as f64;
            grads.scale_grads(k);
            model.params.take_grads_from(&mut grads);
            model.params.optimizer_step(lr, &cfg.adam)?;
            sum.add(&batch_loss);
        }
        let mut rec = EpochRecord {
            epoch,
            lr,
            steps: model.params.optimizer_steps(),
            train_loss: sum.scaled(1.0 / train_set.len() as f64),
            eval: None,
        };
        let last_epoch = epoch + 1 == cfg.epochs;
        if !eval_set.is_empty() && ((epoch + 1) % cfg.eval_every == 0 || last_epoch) {
            let settings = DecoderSettings::new(DecoderKind::Nn, model.cfg.m_headers);
            let m = evaluate_scenes(model, eval_set, &settings)?;
            let k6 = m.k6;
            if best.is_none_or(|b| k6.brier_min_fde < b) {
                best = Some(k6.brier_min_fde);
                if let Some(p) = &out.best {
                    model.params.to_checkpoint(checkpoint_meta(model, epoch + 1, best)).save(p)?;
                }
            }
            rec.eval = Some(m);
        }
        if let Some(p) = &out.last {
            model.params.to_checkpoint(checkpoint_meta(model, epoch + 1, best)).save(p)?;
        }
        if let Some(f) = log.as_mut() {
            let line = serde_json::to_string(&rec).map_err(|e| DspError::parse("log", e.to_string()))?;
            writeln!(f, "{line}").map_err(|e| DspError::io(out.log.as_deref().unwrap_or(Path::new("")), e))?;
        }
        log::info!(
            "epoch {epoch} lr {lr:.2e} loss {:.4} (gc {:.4} gr {:.4} tr {:.4})",
            rec.train_loss.total,
            rec.train_loss.gc,
            rec.train_loss.gr,
            rec.train_loss.tr
        );
        records.push(rec);
    }
    Ok(TrainOutcome {
        records,
        best_brier: best,
    })
}

#[cfg(test)]
mod tests;
