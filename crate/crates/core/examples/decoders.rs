//! Runs the three goal decoders on a synthetic two-peak heatmap and on the
//! heatmap of an untrained network.
//!
//! `cargo run --release --example decoders`

use dsp_core::da_graph::{build_da_graph, DaConfig};
use dsp_core::decoders::{kmeans_goal_decoder, nms_goal_decoder, DecoderKind, GoalSet, KmeansConfig, NmsConfig};
use dsp_core::evaluation::{predict_scene, DecoderSettings};
use dsp_core::geometry::Vec2;
use dsp_core::network::{GraphConfig, Model, NetConfig, SceneInputs};
use dsp_core::scenario::{synth_scenario, MapTemplate, SynthSpec};

fn show(name: &str, g: &GoalSet) {
    println!("{name}:");
    for (p, w) in g.goals.iter().zip(g.probabilities()) {
        println!("  ({:>6.2}, {:>6.2})  p = {w:.3}", p.x, p.y);
    }
}

fn main() -> dsp_core::Result<()> {
    let s = synth_scenario(&SynthSpec::with_template(MapTemplate::TIntersection), 2)?;
    let da = build_da_graph(&s, &DaConfig::desk())?;

    // two Gaussian bumps: a strong one ahead and a weaker one to the right
    let peaks = [(Vec2::new(20.0, 0.0), 1.0), (Vec2::new(6.0, -14.0), 0.6)];
    let heat: Vec<f64> = da
        .nodes
        .iter()
        .map(|n| {
            peaks
                .iter()
                .map(|&(c, a)| a * (-n.position.dist_sq(c) / 18.0).exp())
                .fold(0.0, f64::max)
        })
        .collect();
    show("suppression", &nms_goal_decoder(&heat, &da, &NmsConfig::default())?);
    show("weighted k-means", &kmeans_goal_decoder(&heat, &da, &KmeansConfig::default())?);

    let inputs = SceneInputs::build(&s, &GraphConfig::default())?;
    let model = Model::new(NetConfig::default(), 1)?;
    for kind in DecoderKind::ALL {
        let p = predict_scene(&model, &inputs, &DecoderSettings::new(kind, 6))?;
        println!(
            "untrained network, {kind}: {} goals, {} trajectories of {} steps",
            p.goals.len(),
            p.trajectories.len(),
            p.trajectories[0].len()
        );
    }
    Ok(())
}
