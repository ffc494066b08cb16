//! Trains the default network on a small mixed-template synthetic set and
//! reports training-set metrics for every decoder.
//!
//! `cargo run --release --example train_overfit -- [n_scenarios] [epochs] [batch_size]`

use std::time::Instant;

use dsp_core::decoders::DecoderKind;
use dsp_core::evaluation::{evaluate_scenes, format_report, min_fde, predict_scenes, report_rows, DecoderSettings};
use dsp_core::network::{GraphConfig, Model, NetConfig, SceneInputs};
use dsp_core::scenario::synth::{synth_scenario, MapTemplate, SynthSpec};
use dsp_core::training::{train, TrainConfig, TrainOutputs, TrainSet};

fn main() -> dsp_core::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<usize>().expect("integer argument"));
    let n = args.next().unwrap_or(32);
    let epochs = args.next().unwrap_or(30);
    let batch_size = args.next().unwrap_or(1);
    let scenes = (0..n)
        .map(|i| synth_scenario(&SynthSpec::with_template(MapTemplate::ALL[i % 3]), i as u64))
        .collect::<dsp_core::Result<Vec<_>>>()?;
    let graphs = GraphConfig::default();
    let cfg = TrainConfig {
        epochs,
        decay_start: epochs.saturating_sub(5),
        augment: false,
        batch_size,
        ..Default::default()
    };
    let set = TrainSet::new(scenes.clone(), graphs, cfg.augment)?;
    let eval: Vec<SceneInputs> = scenes.iter().map(|s| SceneInputs::build(s, &graphs)).collect::<dsp_core::Result<_>>()?;
    let mut model = Model::new(NetConfig::default(), 0)?;
    println!("{} parameters", model.params.num_scalars());
    let start = Instant::now();
    let out = train(&mut model, &set, &[], &cfg, 0, None, &TrainOutputs::default())?;
    for r in &out.records {
        let l = r.train_loss;
        println!("epoch {:>2} loss {:.4} (goal cls {:.4}, goal reg {:.4}, traj {:.4})", r.epoch, l.total, l.gc, l.gr, l.tr);
    }
    println!("trained in {:.1}s", start.elapsed().as_secs_f64());
    let mut rows = Vec::new();
    for kind in DecoderKind::ALL {
        let m = evaluate_scenes(&model, &eval, &DecoderSettings::new(kind, model.cfg.m_headers))?;
        rows.extend(report_rows("train", kind, model.cfg.m_headers, &m));
    }
    print!("{}", format_report(&rows));
    let preds = predict_scenes(&model, &eval, &DecoderSettings::new(DecoderKind::Nn, model.cfg.m_headers))?;
    let mut per_scene: Vec<(f64, usize)> = preds
        .iter()
        .zip(&eval)
        .enumerate()
        .map(|(i, (p, s))| (min_fde(&p.trajectories, s.scenario.tracks[s.target].gt_future.as_deref().unwrap_or(&[])), i))
        .collect();
    per_scene.sort_by(|a, b| b.0.total_cmp(&a.0));
    let worst: Vec<String> = per_scene.iter().take(8).map(|(d, i)| format!("#{i} {d:.2}")).collect();
    println!("largest learned-decoder minFDE: {}", worst.join(", "));
    Ok(())
}
