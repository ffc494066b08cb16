//! Compares reverse-mode gradients with central finite differences, first on a
//! small composite expression and then on the full training objective of a
//! toy-width network.
//!
//! `cargo run --release --example gradient_check`

use std::sync::Arc;
use std::time::Instant;

use dsp_core::autodiff::gradcheck::{check_gradients, check_param_gradients};
use dsp_core::autodiff::Tensor;
use dsp_core::da_graph::DaConfig;
use dsp_core::network::{GraphConfig, Model, NetConfig, SceneInputs};
use dsp_core::scenario::samples::simple_scenario_with;
use dsp_core::scenario::{normalize_to_target, Horizon};
use dsp_core::training::{scene_loss, TrainConfig};

fn main() -> dsp_core::Result<()> {
    let x = Tensor::from_rows(&[vec![0.3, -1.2, 0.8], vec![1.5, 0.1, -0.4]]);
    let w = Tensor::from_rows(&[vec![0.2, -0.5], vec![0.7, 0.1], vec![-0.3, 0.9]]);
    let rep = check_gradients(&[x, w], |t, v| {
        let h = t.matmul(v[0], v[1])?;
        let h = t.layer_norm(h, 1e-5)?;
        let h = t.softmax_rows(h)?;
        let h = t.sigmoid(h)?;
        let labels = Arc::new(vec![1.0, 0.4, 0.0, 0.9]);
        let h = t.reshape(h, 4, 1)?;
        t.focal_loss(h, labels, 2.0, 4.0)
    })?;
    println!("composite expression: relative error {:.2e}", rep.max_rel_err);

    let hz = Horizon { t: 4, h: 3, dt: 0.1 };
    let scene = normalize_to_target(&simple_scenario_with(hz))?;
    let graphs = GraphConfig {
        da: DaConfig {
            pitch: 2.0,
            extent: 12.0,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut inputs = SceneInputs::build(&scene, &graphs)?;
    // grid-aligned features leave pooling maxima on near-ties at this width; jitter them off
    for (i, x) in inputs.da_features.data.iter_mut().enumerate() {
        *x += 1e-3 * ((i * 7919 % 1000) as f64 / 1000.0 - 0.5);
    }
    let cfg = NetConfig {
        d_da: 4,
        d_ls: 4,
        d_agt: 4,
        d_dec: 4,
        k_da: 2,
        l_ls: 2,
        num_da_blocks: 1,
        num_laneconv_layers: 1,
        m_headers: 2,
        k_sel: 5,
        t_obs: 4,
        h_pred: 3,
    };
    let model = Model::new(cfg, 23)?;
    let train = TrainConfig::default();
    let start = Instant::now();
    let rep = check_param_gradients(&model.params, |t, p| {
        let m = Model {
            cfg,
            params: p.clone(),
        };
        Ok(scene_loss(&m, t, &inputs, &train)?.total)
    })?;
    println!(
        "full objective: {} DA nodes, {} parameters, relative error {:.2e} ({:.1}s)",
        inputs.da.len(),
        model.params.num_scalars(),
        rep.rel_err,
        start.elapsed().as_secs_f64()
    );
    let mut worst = rep.per_param.clone();
    worst.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (name, e) in worst.iter().take(3) {
        println!("  {name:<24} {e:.2e}");
    }
    Ok(())
}
