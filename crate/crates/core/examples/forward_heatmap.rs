//! One forward pass of the default network: prints tensor shapes and heatmap
//! statistics and writes an SVG of the scene with the heatmap overlay.
//!
//! `cargo run --release --example forward_heatmap -- [out.svg]`

use dsp_core::autodiff::Tape;
use dsp_core::decoders::DecoderKind;
use dsp_core::evaluation::{plot_svg, predict_scene, DecoderSettings};
use dsp_core::network::{GraphConfig, Model, NetConfig, SceneInputs};
use dsp_core::scenario::{synth_scenario, MapTemplate, SynthSpec};

fn main() -> dsp_core::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "forward_heatmap.svg".into());
    let s = synth_scenario(&SynthSpec::with_template(MapTemplate::FourWay), 9)?;
    let inputs = SceneInputs::build(&s, &GraphConfig::default())?;
    let model = Model::new(NetConfig::default(), 0)?;

    let mut t = Tape::new();
    let v = model.forward(&mut t, &inputs)?;
    println!("parameters: {}", model.params.num_scalars());
    println!("agent features {:?}", t.shape(v.agents));
    println!("DA features    {:?}", t.shape(v.da));
    println!("LS features    {:?}", t.shape(v.ls));
    println!("tape nodes     {}", t.len());
    let h = &t.value(v.heatmap).data;
    let (lo, hi) = h.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    println!("heatmap over {} nodes in [{lo:.4}, {hi:.4}]", h.len());

    let p = predict_scene(&model, &inputs, &DecoderSettings::new(DecoderKind::Nn, 6))?;
    std::fs::write(&out, plot_svg(&inputs, Some(&p))).map_err(|e| dsp_core::DspError::io(&out, e))?;
    println!("wrote {out}");
    Ok(())
}
