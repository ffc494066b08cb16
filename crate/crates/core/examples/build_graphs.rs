//! Builds the drivable-area grid, the lane-segment graph and the inter-layer
//! edges for a synthetic four-way intersection and prints their sizes.
//!
//! `cargo run --example build_graphs`

use dsp_core::da_graph::{build_da_graph, DaConfig};
use dsp_core::ls_graph::{build_interlayer_edges, build_ls_graph, InterLayerConfig, LsConfig};
use dsp_core::scenario::{synth_scenario, MapTemplate, SynthSpec};

fn main() -> dsp_core::Result<()> {
    let s = synth_scenario(&SynthSpec::with_template(MapTemplate::FourWay), 5)?;
    let da = build_da_graph(&s, &DaConfig::desk())?;
    let ls = build_ls_graph(&s, &LsConfig::default())?;
    let e = build_interlayer_edges(&da, &ls, &s.tracks, &InterLayerConfig::default());

    let degree: usize = da.edges.iter().map(Vec::len).sum();
    println!(
        "DA: {} nodes at pitch {} m, mean degree {:.2}, {} dilation levels",
        da.len(),
        da.pitch,
        degree as f64 / da.len() as f64,
        da.dilation_levels()
    );
    for k in 0..da.dilation_levels() {
        let linked: usize = da.neighbor_sets(k).iter().map(Vec::len).sum();
        println!("  level {k}: {linked} directed links");
    }
    println!(
        "LS: {} segments, pre {}, suc {}, left {}, right {}",
        ls.len(),
        ls.pre.len(),
        ls.suc.len(),
        ls.left.len(),
        ls.right.len()
    );
    for (l, r) in ls.dilated_suc.iter().enumerate() {
        println!("  {}-hop successors: {}", 1 << l, r.len());
    }
    for (name, list) in [
        ("da_to_ls", &e.da_to_ls),
        ("ls_to_da", &e.ls_to_da),
        ("agent_to_ls", &e.agent_to_ls),
        ("ls_to_agent", &e.ls_to_agent),
        ("da_to_agent", &e.da_to_agent),
        ("agent_to_agent", &e.agent_to_agent),
    ] {
        println!("{name:>15}: {:>5} pairs within {} m", list.pairs.len(), list.radius);
    }
    Ok(())
}
