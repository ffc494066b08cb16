//! Synthesizes one scenario per map template, writes them to a directory and
//! reads them back.
//!
//! `cargo run --example synth_scenarios -- [out_dir]`

use std::path::PathBuf;

use dsp_core::scenario::{read_scenario, synth_scenario, write_scenario, MapTemplate, SynthSpec};

fn main() -> dsp_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth_out".into()));
    std::fs::create_dir_all(&out).map_err(|e| dsp_core::DspError::io(&out, e))?;
    for (i, template) in MapTemplate::ALL.into_iter().enumerate() {
        let spec = SynthSpec {
            n_agents: 5,
            n_obstacles: 2,
            ..SynthSpec::with_template(template)
        };
        let s = synth_scenario(&spec, 100 + i as u64)?;
        let path = out.join(format!("{template:?}.json").to_lowercase());
        write_scenario(&s, &path)?;
        let back = read_scenario(&path)?;
        assert_eq!(back, s, "round trip");
        let target = s.target()?;
        let goal = target.gt_goal().expect("synthetic targets have a future");
        println!(
            "{template:?}: {} lanes, {} agents, {} obstacles, goal at ({:.1}, {:.1}) -> {}",
            s.lanes.len(),
            s.tracks.len(),
            s.obstacle_polygons.len(),
            goal.x,
            goal.y,
            path.display()
        );
    }
    Ok(())
}
