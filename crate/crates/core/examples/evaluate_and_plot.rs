//! Trains a narrow network briefly with a held-out split, saves the best
//! checkpoint, reloads it, evaluates every decoder and plots the held-out scenes.
//!
//! `cargo run --release --example evaluate_and_plot -- [out_dir]`

use std::path::PathBuf;

use dsp_core::decoders::DecoderKind;
use dsp_core::evaluation::{format_report, plot_svg, predict_scenes, report_rows, summarize, DecoderSettings};
use dsp_core::network::{GraphConfig, Model, NetConfig, SceneInputs};
use dsp_core::scenario::{synth_scenario, MapTemplate, SynthSpec};
use dsp_core::training::{load_model, train, TrainConfig, TrainOutputs, TrainSet};
use dsp_core::DspError;

fn main() -> dsp_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "eval_out".into()));
    std::fs::create_dir_all(&out).map_err(|e| DspError::io(&out, e))?;
    let scenes = (0..12)
        .map(|i| synth_scenario(&SynthSpec::with_template(MapTemplate::ALL[i % 3]), 1000 + i as u64))
        .collect::<dsp_core::Result<Vec<_>>>()?;
    let (train_scenes, held_out) = scenes.split_at(9);
    let graphs = GraphConfig::default();
    let val: Vec<SceneInputs> = held_out
        .iter()
        .map(|s| SceneInputs::build(s, &graphs))
        .collect::<dsp_core::Result<_>>()?;

    let cfg = NetConfig {
        d_ls: 32,
        d_agt: 32,
        d_dec: 32,
        ..NetConfig::default()
    };
    let mut model = Model::new(cfg, 0)?;
    let tcfg = TrainConfig {
        epochs: 4,
        decay_start: 3,
        eval_every: 2,
        ..Default::default()
    };
    let set = TrainSet::new(train_scenes.to_vec(), graphs, tcfg.augment)?;
    let outputs = TrainOutputs {
        log: Some(out.join("train_log.jsonl")),
        best: Some(out.join("best.json")),
        last: Some(out.join("last.json")),
    };
    let run = train(&mut model, &set, &val, &tcfg, 0, None, &outputs)?;
    println!("best held-out Brier-minFDE {:.3}", run.best_brier.unwrap_or(f64::NAN));

    let (best, epochs, _) = load_model(&out.join("best.json"))?;
    println!("reloaded checkpoint after {epochs} epochs");
    let mut rows = Vec::new();
    for kind in DecoderKind::ALL {
        let preds = predict_scenes(&best, &val, &DecoderSettings::new(kind, cfg.m_headers))?;
        rows.extend(report_rows("held-out", kind, cfg.m_headers, &summarize(&val, &preds)?));
        if kind == DecoderKind::Nn {
            for (i, (s, p)) in val.iter().zip(&preds).enumerate() {
                let path = out.join(format!("held_out_{i}.svg"));
                std::fs::write(&path, plot_svg(s, Some(p))).map_err(|e| DspError::io(&path, e))?;
            }
        }
    }
    print!("{}", format_report(&rows));
    Ok(())
}
