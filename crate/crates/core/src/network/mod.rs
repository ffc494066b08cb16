//! Scene encoder: agent, drivable-area and lane-segment encoders fused by graph attention,
//! a per-node goal heatmap head, and goal-conditioned trajectory completion.

mod layers;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{IndexSets, ParamStore, Tape, Tensor, Var};
use crate::da_graph::{build_da_graph, DaConfig, DaGraph};
use crate::error::{DspError, Result};
use crate::ls_graph::{build_interlayer_edges, build_ls_graph, InterLayerConfig, InterLayerEdges, LsConfig, LsGraph, LS_FEATURE_DIM};
use crate::scenario::{Scenario, STATE_DIM};

pub use layers::{Ctx, GatEdges, LaneRelations};
pub(crate) use layers::{mlp2, register_mlp2, Reg, COORD_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub d_da: usize,
    pub d_ls: usize,
    pub d_agt: usize,
    /// Width of the goal decoder.
    pub d_dec: usize,
    /// DA dilation layers per encoder block.
    pub k_da: usize,
    /// LaneConv dilation levels.
    pub l_ls: usize,
    pub num_da_blocks: usize,
    pub num_laneconv_layers: usize,
    /// Goal headers (output modes).
    pub m_headers: usize,
    /// Heatmap candidates kept by the learned decoder.
    pub k_sel: usize,
    /// Observed steps.
    pub t_obs: usize,
    /// Predicted steps.
    pub h_pred: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            d_da: 32,
            d_ls: 128,
            d_agt: 128,
            d_dec: 64,
            k_da: 4,
            l_ls: 4,
            num_da_blocks: 2,
            num_laneconv_layers: 2,
            m_headers: 6,
            k_sel: 64,
            t_obs: 20,
            h_pred: 30,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.d_da,
            self.d_ls,
            self.d_agt,
            self.d_dec,
            self.k_da,
            self.l_ls,
            self.num_da_blocks,
            self.num_laneconv_layers,
            self.m_headers,
            self.k_sel,
            self.t_obs,
            self.h_pred,
        ];
        if all.contains(&0) {
            return Err(DspError::InvalidConfig(format!("network sizes must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Graph construction parameters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub da: DaConfig,
    pub ls: LsConfig,
    pub interlayer: InterLayerConfig,
}

/// Everything the network consumes for one target-frame scenario.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    pub scenario: Scenario,
    pub da: DaGraph,
    pub ls: LsGraph,
    pub edges: InterLayerEdges,
    pub target: usize,
    pub da_sets: Vec<IndexSets>,
    pub lane_rel: LaneRelations,
    pub gat_agent_ls: GatEdges,
    pub gat_da_ls: GatEdges,
    pub gat_ls_da: GatEdges,
    pub gat_ls_agent: GatEdges,
    pub gat_da_agent: GatEdges,
    pub gat_agent_agent: GatEdges,
    /// `(agents * T) x 5`, oldest step first within each agent; positions scaled by 0.1.
    pub agent_states: Tensor,
    pub da_features: Tensor,
    pub ls_features: Tensor,
}

impl SceneInputs {
    /// Builds graphs and input tensors. The scenario must already be in the target frame.
    pub fn build(s: &Scenario, g: &GraphConfig) -> Result<Self> {
        s.validate()?;
        let target = s.target_index()?;
        let da = build_da_graph(s, &g.da)?;
        let ls = build_ls_graph(s, &g.ls)?;
        let edges = build_interlayer_edges(&da, &ls, &s.tracks, &g.interlayer);
        let da_sets = (0..da.dilation_levels())
            .map(|k| IndexSets::from_sets(da.neighbor_sets(k)))
            .collect();
        let arc = |r: &crate::ls_graph::Relation| Arc::new(r.pairs.clone());
        let lane_rel = LaneRelations {
            n: ls.len(),
            left: arc(&ls.left),
            right: arc(&ls.right),
            pre: ls.dilated_pre.iter().map(arc).collect(),
            suc: ls.dilated_suc.iter().map(arc).collect(),
        };
        let n_agt = s.tracks.len();
        let t = s.horizon.t;
        let mut states = Vec::with_capacity(n_agt * t * STATE_DIM);
        for tr in &s.tracks {
            for st in &tr.states {
                states.extend_from_slice(&st.to_array());
            }
        }
        let (daf, cols) = da.input_features();
        let mut da_features = Tensor::from_vec(da.len(), cols, daf);
        let mut ls_features = Tensor::from_vec(ls.len(), LS_FEATURE_DIM, ls.input_features());
        let mut agent_states = Tensor::from_vec(n_agt * t, STATE_DIM, states);
        // absolute coordinates are the first two columns of every input table
        for x in [&mut da_features, &mut ls_features, &mut agent_states] {
            for r in 0..x.rows {
                x.row_mut(r)[..2].iter_mut().for_each(|v| *v *= COORD_SCALE);
            }
        }
        Ok(SceneInputs {
            gat_agent_ls: GatEdges::new(&edges.agent_to_ls.pairs, ls.len()),
            gat_da_ls: GatEdges::new(&edges.da_to_ls.pairs, ls.len()),
            gat_ls_da: GatEdges::new(&edges.ls_to_da.pairs, da.len()),
            gat_ls_agent: GatEdges::new(&edges.ls_to_agent.pairs, n_agt),
            gat_da_agent: GatEdges::new(&edges.da_to_agent.pairs, n_agt),
            gat_agent_agent: GatEdges::new(&edges.agent_to_agent.pairs, n_agt),
            agent_states,
            da_features,
            ls_features,
            scenario: s.clone(),
            da,
            ls,
            edges,
            target,
            da_sets,
            lane_rel,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.scenario.tracks.len()
    }
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SceneVars {
    /// Agents after map fusion, before agent interaction.
    pub agents: Var,
    pub da: Var,
    pub ls: Var,
    /// `N_da x 1`, in `[0, 1]`.
    pub heatmap: Var,
    /// Target feature after all fusion steps, `1 x d_agt`.
    pub target: Var,
}

/// Plain-value copy of the fused features.
#[derive(Debug, Clone)]
pub struct SceneFeatures {
    pub agent_feats: Tensor,
    pub da_feats: Tensor,
    pub ls_feats: Tensor,
    pub heatmap: Vec<f64>,
    pub target_feat: Tensor,
}

impl SceneFeatures {
    pub fn from_tape(t: &Tape, v: &SceneVars) -> Self {
        SceneFeatures {
            agent_feats: t.value(v.agents).clone(),
            da_feats: t.value(v.da).clone(),
            ls_feats: t.value(v.ls).clone(),
            heatmap: t.value(v.heatmap).data.clone(),
            target_feat: t.value(v.target).clone(),
        }
    }
}

/// Optional pathway switches for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pathways {
    pub da_to_ls: bool,
}

impl Default for Pathways {
    fn default() -> Self {
        Pathways { da_to_ls: true }
    }
}

/// Network definition plus its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: NetConfig,
    pub params: ParamStore,
}

const DA_BLOCK_EXTRA: &str = "da_blk_post";

impl Model {
    pub fn new(cfg: NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new(seed);
        let mut r = Reg(&mut params);
        layers::register_agent_encoder(&mut r, STATE_DIM, cfg.d_agt)?;
        register_mlp2(&mut r, "da_in", 2 + cfg.t_obs, cfg.d_da, cfg.d_da)?;
        register_mlp2(&mut r, "ls_in", LS_FEATURE_DIM, cfg.d_ls, cfg.d_ls)?;
        for b in 0..cfg.num_da_blocks {
            layers::register_da_block(&mut r, &format!("da_blk{b}"), cfg.d_da, cfg.k_da)?;
        }
        layers::register_da_block(&mut r, DA_BLOCK_EXTRA, cfg.d_da, cfg.k_da)?;
        layers::register_gat(&mut r, "gat_agent_ls", cfg.d_ls, cfg.d_agt)?;
        layers::register_gat(&mut r, "gat_da_ls", cfg.d_ls, cfg.d_da)?;
        for l in 0..cfg.num_laneconv_layers {
            layers::register_laneconv(&mut r, &format!("lane{l}"), cfg.d_ls, cfg.l_ls)?;
        }
        layers::register_gat(&mut r, "gat_ls_da", cfg.d_da, cfg.d_ls)?;
        layers::register_gat(&mut r, "gat_ls_agent", cfg.d_agt, cfg.d_ls)?;
        layers::register_gat(&mut r, "gat_da_agent", cfg.d_agt, cfg.d_da)?;
        layers::register_gat(&mut r, "gat_agent_agent", cfg.d_agt, cfg.d_agt)?;
        r.linear("hm.l1", cfg.d_da, cfg.d_da, true)?;
        r.linear("hm.l2", cfg.d_da, 1, true)?;
        crate::decoders::register_nn_decoder(&mut r, &cfg)?;
        layers::register_completion(&mut r, cfg.d_agt, cfg.h_pred)?;
        Ok(Model { cfg, params })
    }

    pub fn ctx<'a>(&'a self, t: &'a mut Tape) -> Ctx<'a> {
        Ctx { t, p: &self.params }
    }

    fn check_inputs(&self, s: &SceneInputs) -> Result<()> {
        let [_, cols] = s.da_features.shape();
        if cols != 2 + self.cfg.t_obs {
            return Err(DspError::shape(
                "forward",
                format!("DA input width {cols}, expected {}", 2 + self.cfg.t_obs),
            ));
        }
        if s.agent_states.rows != s.n_agents() * self.cfg.t_obs {
            return Err(DspError::shape("forward", "agent tracks do not have T states"));
        }
        if s.da_sets.len() < self.cfg.k_da {
            return Err(DspError::shape(
                "forward",
                format!("{} DA dilation tables, need {}", s.da_sets.len(), self.cfg.k_da),
            ));
        }
        if s.lane_rel.pre.len() < self.cfg.l_ls {
            return Err(DspError::shape(
                "forward",
                format!("{} LS dilation levels, need {}", s.lane_rel.pre.len(), self.cfg.l_ls),
            ));
        }
        Ok(())
    }

    /// Encodes agents from stacked states; one row per agent.
    pub fn encode_agents(&self, t: &mut Tape, states: Var, n_agents: usize) -> Result<Var> {
        let plans = layers::agent_stage_plans(n_agents, self.cfg.t_obs, 3);
        layers::agent_encoder(&mut self.ctx(t), states, &plans, n_agents)
    }

    /// One DA encoder block (`K` dilated layers).
    pub fn da_block(&self, t: &mut Tape, u: Var, sets: &[IndexSets], block: usize) -> Result<Var> {
        let prefix = if block < self.cfg.num_da_blocks {
            format!("da_blk{block}")
        } else {
            DA_BLOCK_EXTRA.to_string()
        };
        layers::da_block(&mut self.ctx(t), u, &sets[..self.cfg.k_da], &prefix)
    }

    pub fn laneconv(&self, t: &mut Tape, v: Var, rel: &LaneRelations, layer: usize) -> Result<Var> {
        let rel = LaneRelations {
            n: rel.n,
            left: rel.left.clone(),
            right: rel.right.clone(),
            pre: rel.pre[..self.cfg.l_ls].to_vec(),
            suc: rel.suc[..self.cfg.l_ls].to_vec(),
        };
        layers::laneconv(&mut self.ctx(t), v, &rel, &format!("lane{layer}"))
    }

    /// Graph attention from `ctx` rows into `targets`; also returns per-edge weights.
    pub fn gat(&self, t: &mut Tape, name: &str, targets: Var, ctx: Var, edges: &GatEdges) -> Result<(Var, Option<Var>)> {
        layers::gat(&mut self.ctx(t), targets, ctx, edges, name)
    }

    pub fn forward(&self, t: &mut Tape, s: &SceneInputs) -> Result<SceneVars> {
        self.forward_with(t, s, Pathways::default())
    }

    pub fn forward_with(&self, t: &mut Tape, s: &SceneInputs, paths: Pathways) -> Result<SceneVars> {
        self.check_inputs(s)?;
        let states = t.constant(s.agent_states.clone())?;
        let agents = self.encode_agents(t, states, s.n_agents())?;
        let da_in = t.constant(s.da_features.clone())?;
        let mut da = mlp2(&mut self.ctx(t), da_in, "da_in")?;
        let ls_in = t.constant(s.ls_features.clone())?;
        let mut ls = mlp2(&mut self.ctx(t), ls_in, "ls_in")?;

        for b in 0..self.cfg.num_da_blocks {
            da = self.da_block(t, da, &s.da_sets, b)?;
        }
        ls = self.gat(t, "gat_agent_ls", ls, agents, &s.gat_agent_ls)?.0;
        if paths.da_to_ls {
            ls = self.gat(t, "gat_da_ls", ls, da, &s.gat_da_ls)?.0;
        }
        for l in 0..self.cfg.num_laneconv_layers {
            ls = self.laneconv(t, ls, &s.lane_rel, l)?;
        }
        da = self.gat(t, "gat_ls_da", da, ls, &s.gat_ls_da)?.0;
        let agents = self.gat(t, "gat_ls_agent", agents, ls, &s.gat_ls_agent)?.0;
        da = self.da_block(t, da, &s.da_sets, self.cfg.num_da_blocks)?;

        let heatmap = {
            let mut c = self.ctx(t);
            let h = c.linear(da, "hm.l1", true)?;
            let h = c.t.relu(h)?;
            let h = c.linear(h, "hm.l2", true)?;
            c.t.sigmoid(h)?
        };

        let fused = self.gat(t, "gat_da_agent", agents, da, &s.gat_da_agent)?.0;
        let fused = self.gat(t, "gat_agent_agent", fused, fused, &s.gat_agent_agent)?.0;
        let target = t.gather(fused, Arc::new(vec![Some(s.target)]))?;
        Ok(SceneVars {
            agents,
            da,
            ls,
            heatmap,
            target,
        })
    }

    /// Trajectories (`M x 2H`, flattened `x, y` pairs) for each goal row of `goals`.
    pub fn complete_trajectory(&self, t: &mut Tape, target_feat: Var, goals: Var) -> Result<Var> {
        if t.shape(goals)[1] != 2 {
            return Err(DspError::shape("complete_trajectory", "goals must be M x 2"));
        }
        layers::completion(&mut self.ctx(t), target_feat, goals, self.cfg.h_pred)
    }
}
