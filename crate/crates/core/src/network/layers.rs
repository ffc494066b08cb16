use std::sync::Arc;

use crate::autodiff::{IndexSets, Init, ParamStore, Tape, Tensor, Var};
use crate::error::Result;

pub(crate) const LN_EPS: f64 = 1e-5;
pub(crate) const LEAKY_SLOPE: f64 = 0.01;

/// Registers parameters under dotted names.
pub(crate) struct Reg<'a>(pub &'a mut ParamStore);

impl Reg<'_> {
    pub fn linear(&mut self, prefix: &str, din: usize, dout: usize, bias: bool) -> Result<()> {
        self.0.register(&format!("{prefix}.w"), din, dout, Init::FanIn(din))?;
        if bias {
            self.0.register(&format!("{prefix}.b"), 1, dout, Init::Zeros)?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.0.register(&format!("{prefix}.g"), 1, d, Init::Ones)?;
        self.0.register(&format!("{prefix}.b"), 1, d, Init::Zeros)
    }
}

/// Forward-pass context: a tape plus read-only parameters.
pub struct Ctx<'a> {
    pub t: &'a mut Tape,
    pub p: &'a ParamStore,
}

impl Ctx<'_> {
    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.t.param(self.p, name)
    }

    pub fn linear(&mut self, x: Var, prefix: &str, bias: bool) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = if bias {
            Some(self.param(&format!("{prefix}.b"))?)
        } else {
            None
        };
        self.t.linear(x, w, b)
    }

    /// Layer norm with learned scale and shift.
    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.g"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let n = self.t.layer_norm(x, LN_EPS)?;
        let n = self.t.mul_row(n, g)?;
        self.t.add_row(n, b)
    }

    /// Layer norm followed by ReLU.
    pub fn sigma(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let n = self.norm(x, prefix)?;
        self.t.relu(n)
    }
}

// ---------------------------------------------------------------- perceptrons

/// `linear -> norm -> relu -> linear`.
pub(crate) fn register_mlp2(r: &mut Reg, prefix: &str, din: usize, dh: usize, dout: usize) -> Result<()> {
    r.linear(&format!("{prefix}.l1"), din, dh, true)?;
    r.norm(&format!("{prefix}.n1"), dh)?;
    r.linear(&format!("{prefix}.l2"), dh, dout, true)
}

pub(crate) fn mlp2(c: &mut Ctx, x: Var, prefix: &str) -> Result<Var> {
    let h = c.linear(x, &format!("{prefix}.l1"), true)?;
    let h = c.sigma(h, &format!("{prefix}.n1"))?;
    c.linear(h, &format!("{prefix}.l2"), true)
}

// ---------------------------------------------------------------- agent encoder

/// Row layout of one temporal stage: agent `a`, slot `i` is row `a * slots + i`.
#[derive(Debug, Clone)]
pub(crate) struct StagePlan {
    slots: usize,
    /// Taps at slots `i - 1, i, i + 1` of the previous stage, for each output row.
    taps_prev: [Arc<Vec<Option<usize>>>; 3],
    /// Taps within this stage.
    taps_self: [Arc<Vec<Option<usize>>>; 3],
}

/// Stride-2 stages anchored so that the last slot of every stage is the latest step.
pub(crate) fn agent_stage_plans(n_agents: usize, t: usize, stages: usize) -> Vec<StagePlan> {
    let mut plans = Vec::with_capacity(stages);
    // indices (within the previous stage) kept by each stage
    let mut prev_slots = t;
    for s in 0..stages {
        let keep: Vec<usize> = if s == 0 {
            (0..t).collect()
        } else {
            let mut k: Vec<usize> = (0..prev_slots).rev().step_by(2).collect();
            k.reverse();
            k
        };
        let slots = keep.len();
        let tap = |offset: isize, source_slots: usize, center: &dyn Fn(usize) -> usize| {
            let mut v = Vec::with_capacity(n_agents * slots);
            for a in 0..n_agents {
                for i in 0..slots {
                    let c = center(i) as isize + offset;
                    v.push((c >= 0 && (c as usize) < source_slots).then(|| a * source_slots + c as usize));
                }
            }
            Arc::new(v)
        };
        let from_prev = |i: usize| keep[i];
        let ident = |i: usize| i;
        plans.push(StagePlan {
            slots,
            taps_prev: [
                tap(-1, prev_slots, &from_prev),
                tap(0, prev_slots, &from_prev),
                tap(1, prev_slots, &from_prev),
            ],
            taps_self: [tap(-1, slots, &ident), tap(0, slots, &ident), tap(1, slots, &ident)],
        });
        prev_slots = slots;
    }
    plans
}

pub(crate) fn agent_channels(d_agt: usize) -> [usize; 3] {
    let floor = d_agt.min(4);
    [(d_agt / 4).max(floor), (d_agt / 2).max(floor), d_agt]
}

pub(crate) fn register_agent_encoder(r: &mut Reg, din: usize, d_agt: usize) -> Result<()> {
    let mut cin = din;
    for (s, &c) in agent_channels(d_agt).iter().enumerate() {
        r.linear(&format!("agt.s{s}.conv1"), 3 * cin, c, false)?;
        r.norm(&format!("agt.s{s}.n1"), c)?;
        r.linear(&format!("agt.s{s}.conv2"), 3 * c, c, false)?;
        r.norm(&format!("agt.s{s}.n2"), c)?;
        r.linear(&format!("agt.s{s}.skip"), cin, c, false)?;
        r.norm(&format!("agt.s{s}.ns"), c)?;
        cin = c;
    }
    Ok(())
}

fn conv3(c: &mut Ctx, x: Var, taps: &[Arc<Vec<Option<usize>>>; 3], prefix: &str) -> Result<Var> {
    let g: Vec<Var> = taps
        .iter()
        .map(|tp| c.t.gather(x, tp.clone()))
        .collect::<Result<_>>()?;
    let cat = c.t.concat_cols(&g)?;
    c.linear(cat, prefix, false)
}

/// Residual 1-D convolution stack over `(agents * T) x 5` stacked states; one row per agent out.
pub(crate) fn agent_encoder(c: &mut Ctx, states: Var, plans: &[StagePlan], n_agents: usize) -> Result<Var> {
    let mut x = states;
    for (s, plan) in plans.iter().enumerate() {
        let h = conv3(c, x, &plan.taps_prev, &format!("agt.s{s}.conv1"))?;
        let h = c.sigma(h, &format!("agt.s{s}.n1"))?;
        let h = conv3(c, h, &plan.taps_self, &format!("agt.s{s}.conv2"))?;
        let h = c.norm(h, &format!("agt.s{s}.n2"))?;
        let centre = c.t.gather(x, plan.taps_prev[1].clone())?;
        let skip = c.linear(centre, &format!("agt.s{s}.skip"), false)?;
        let skip = c.norm(skip, &format!("agt.s{s}.ns"))?;
        let sum = c.t.add(h, skip)?;
        x = c.t.relu(sum)?;
    }
    let slots = plans.last().map_or(0, |p| p.slots);
    let last: Vec<Option<usize>> = (0..n_agents).map(|a| Some(a * slots + slots - 1)).collect();
    c.t.gather(x, Arc::new(last))
}

// ---------------------------------------------------------------- DA encoder

pub(crate) fn register_da_block(r: &mut Reg, prefix: &str, d: usize, levels: usize) -> Result<()> {
    for k in 0..levels {
        r.linear(&format!("{prefix}.k{k}.w1"), d, d, false)?;
        r.norm(&format!("{prefix}.k{k}.n1"), d)?;
        r.linear(&format!("{prefix}.k{k}.w2"), 2 * d, d, false)?;
        r.norm(&format!("{prefix}.k{k}.n2"), d)?;
        r.linear(&format!("{prefix}.k{k}.w3"), d, d, false)?;
        r.norm(&format!("{prefix}.k{k}.n3"), d)?;
    }
    Ok(())
}

/// Per layer `k`: `u <- sigma(u + sigma((u ++ max_{j in N(i,k)} sigma(u_j W1)) W2) W3)`.
pub(crate) fn da_block(c: &mut Ctx, u: Var, sets: &[IndexSets], prefix: &str) -> Result<Var> {
    let mut u = u;
    for (k, set) in sets.iter().enumerate() {
        let p = c.linear(u, &format!("{prefix}.k{k}.w1"), false)?;
        let p = c.sigma(p, &format!("{prefix}.k{k}.n1"))?;
        let pooled = c.t.segment_max(p, set)?;
        let cat = c.t.concat_cols(&[u, pooled])?;
        let h = c.linear(cat, &format!("{prefix}.k{k}.w2"), false)?;
        let h = c.sigma(h, &format!("{prefix}.k{k}.n2"))?;
        let h = c.linear(h, &format!("{prefix}.k{k}.w3"), false)?;
        let s = c.t.add(u, h)?;
        u = c.sigma(s, &format!("{prefix}.k{k}.n3"))?;
    }
    Ok(u)
}

// ---------------------------------------------------------------- LaneConv

/// Relations of one LS graph in a form ready for sparse products.
#[derive(Debug, Clone)]
pub struct LaneRelations {
    pub n: usize,
    pub left: Arc<Vec<(usize, usize)>>,
    pub right: Arc<Vec<(usize, usize)>>,
    pub pre: Vec<Arc<Vec<(usize, usize)>>>,
    pub suc: Vec<Arc<Vec<(usize, usize)>>>,
}

pub(crate) fn register_laneconv(r: &mut Reg, prefix: &str, d: usize, levels: usize) -> Result<()> {
    r.linear(&format!("{prefix}.w0"), d, d, true)?;
    r.linear(&format!("{prefix}.left"), d, d, false)?;
    r.linear(&format!("{prefix}.right"), d, d, false)?;
    for l in 0..levels {
        r.linear(&format!("{prefix}.pre{l}"), d, d, false)?;
        r.linear(&format!("{prefix}.suc{l}"), d, d, false)?;
    }
    r.norm(&format!("{prefix}.n1"), d)?;
    r.linear(&format!("{prefix}.out"), d, d, false)?;
    r.norm(&format!("{prefix}.n2"), d)
}

/// `V' = V W0 + sum_r A_r V W_r`, then `relu(V + norm(sigma(V') W_out))`.
pub(crate) fn laneconv(c: &mut Ctx, v: Var, rel: &LaneRelations, prefix: &str) -> Result<Var> {
    let mut acc = c.linear(v, &format!("{prefix}.w0"), true)?;
    let mut terms: Vec<(Arc<Vec<(usize, usize)>>, String)> = vec![
        (rel.left.clone(), format!("{prefix}.left")),
        (rel.right.clone(), format!("{prefix}.right")),
    ];
    for (l, (p, s)) in rel.pre.iter().zip(&rel.suc).enumerate() {
        terms.push((p.clone(), format!("{prefix}.pre{l}")));
        terms.push((s.clone(), format!("{prefix}.suc{l}")));
    }
    for (pairs, name) in terms {
        if pairs.is_empty() {
            continue;
        }
        let agg = c.t.spmm(pairs, v, rel.n)?;
        let term = c.linear(agg, &name, false)?;
        acc = c.t.add(acc, term)?;
    }
    let h = c.sigma(acc, &format!("{prefix}.n1"))?;
    let h = c.linear(h, &format!("{prefix}.out"), false)?;
    let h = c.norm(h, &format!("{prefix}.n2"))?;
    let s = c.t.add(h, v)?;
    c.t.relu(s)
}

// ---------------------------------------------------------------- GAT

/// Context-to-target edges in canonical `(target, source)` order.
#[derive(Debug, Clone)]
pub struct GatEdges {
    pub n_targets: usize,
    pub src: Arc<Vec<Option<usize>>>,
    pub tgt: Arc<Vec<Option<usize>>>,
    pub tgt_ids: Arc<Vec<usize>>,
    /// 1 for targets with at least one context, else 0.
    pub has_context: Arc<Vec<f64>>,
}

impl GatEdges {
    /// `pairs` are `(source, target)`; order and duplicates of distinct pairs are irrelevant.
    pub fn new(pairs: &[(usize, usize)], n_targets: usize) -> Self {
        let mut e: Vec<(usize, usize)> = pairs.iter().map(|&(s, t)| (t, s)).collect();
        e.sort_unstable();
        let mut has = vec![0.0; n_targets];
        for &(t, _) in &e {
            has[t] = 1.0;
        }
        GatEdges {
            n_targets,
            src: Arc::new(e.iter().map(|&(_, s)| Some(s)).collect()),
            tgt: Arc::new(e.iter().map(|&(t, _)| Some(t)).collect()),
            tgt_ids: Arc::new(e.iter().map(|&(t, _)| t).collect()),
            has_context: Arc::new(has),
        }
    }

    pub fn len(&self) -> usize {
        self.tgt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tgt_ids.is_empty()
    }
}

pub(crate) fn register_gat(r: &mut Reg, prefix: &str, d_tgt: usize, d_ctx: usize) -> Result<()> {
    r.linear(&format!("{prefix}.w_tgt"), d_tgt, d_tgt, false)?;
    r.linear(&format!("{prefix}.w_ctx"), d_ctx, d_tgt, false)?;
    r.linear(&format!("{prefix}.w_att"), 2 * d_tgt, 1, false)?;
    r.linear(&format!("{prefix}.w1"), d_ctx, d_tgt, false)?;
    r.linear(&format!("{prefix}.w2"), 2 * d_tgt, d_tgt, false)?;
    r.norm(&format!("{prefix}.n"), d_tgt)
}

/// Attention weights per edge (in `edges` order) and the updated targets.
pub(crate) fn gat(c: &mut Ctx, s: Var, ctx: Var, edges: &GatEdges, prefix: &str) -> Result<(Var, Option<Var>)> {
    if edges.is_empty() {
        return Ok((s, None));
    }
    let pt = c.linear(s, &format!("{prefix}.w_tgt"), false)?;
    let pc = c.linear(ctx, &format!("{prefix}.w_ctx"), false)?;
    let et = c.t.gather(pt, edges.tgt.clone())?;
    let ec = c.t.gather(pc, edges.src.clone())?;
    let cat = c.t.concat_cols(&[et, ec])?;
    let logit = c.linear(cat, &format!("{prefix}.w_att"), false)?;
    let logit = c.t.leaky_relu(logit, LEAKY_SLOPE)?;
    let alpha = c.t.segment_softmax(logit, edges.tgt_ids.clone())?;

    let msg = c.linear(ctx, &format!("{prefix}.w1"), false)?;
    let msg = c.t.gather(msg, edges.src.clone())?;
    let msg = c.t.mul_col(msg, alpha)?;
    let msg = c.t.scatter_sum(msg, edges.tgt_ids.clone(), edges.n_targets)?;
    let cat = c.t.concat_cols(&[s, msg])?;
    let u = c.linear(cat, &format!("{prefix}.w2"), false)?;
    let u = c.norm(u, &format!("{prefix}.n"))?;
    let u = c.t.leaky_relu(u, LEAKY_SLOPE)?;
    let u = c.t.scale_rows(u, edges.has_context.clone())?;
    Ok((c.t.add(s, u)?, Some(alpha)))
}

// ---------------------------------------------------------------- completion

pub(crate) fn register_completion(r: &mut Reg, d_agt: usize, h: usize) -> Result<()> {
    r.linear("cmp.in", d_agt + 2, d_agt, true)?;
    r.norm("cmp.n0", d_agt)?;
    r.linear("cmp.r1", d_agt, d_agt, false)?;
    r.norm("cmp.n1", d_agt)?;
    r.linear("cmp.r2", d_agt, d_agt, false)?;
    r.norm("cmp.n2", d_agt)?;
    r.linear("cmp.out", d_agt, 2 * h, true)
}

/// Scale applied to metric coordinates fed to perceptrons.
pub(crate) const COORD_SCALE: f64 = 0.1;

/// Rows of `goals` (`M x 2`) each paired with `feat` (`1 x d`); returns `M x 2H` flattened
/// `[x1, y1, x2, y2, ...]` as a straight ramp to the goal plus a learned residual.
pub(crate) fn completion(c: &mut Ctx, feat: Var, goals: Var, h: usize) -> Result<Var> {
    let m = c.t.shape(goals)[0];
    let rep = c.t.gather(feat, Arc::new(vec![Some(0); m]))?;
    let g_in = c.t.scale(goals, COORD_SCALE)?;
    let x = c.t.concat_cols(&[rep, g_in])?;
    let x = c.linear(x, "cmp.in", true)?;
    let x = c.sigma(x, "cmp.n0")?;
    let r = c.linear(x, "cmp.r1", false)?;
    let r = c.sigma(r, "cmp.n1")?;
    let r = c.linear(r, "cmp.r2", false)?;
    let r = c.norm(r, "cmp.n2")?;
    let x = c.t.add(x, r)?;
    let x = c.t.relu(x)?;
    let out = c.linear(x, "cmp.out", true)?;
    let mut ramp = Tensor::zeros(2, 2 * h);
    for s in 0..h {
        let f = (s + 1) as f64 / h as f64;
        ramp.data[2 * s] = f;
        ramp.data[2 * h + 2 * s + 1] = f;
    }
    let ramp = c.t.constant(ramp)?;
    let base = c.t.matmul(goals, ramp)?;
    c.t.add(base, out)
}
