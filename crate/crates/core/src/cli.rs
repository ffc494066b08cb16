//! Command-line front end: synthesis, graph dumps, training, prediction,
//! evaluation and plotting.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::Checkpoint;
use crate::decoders::{DecoderKind, KmeansConfig, NmsConfig};
use crate::error::{DspError, Result};
use crate::evaluation::{
    format_report, plot_svg, predict_scenes, report_rows, summarize, DecoderSettings, PredictionSet, ReportRow,
    PREDICTION_SCHEMA_VERSION,
};
use crate::network::{GraphConfig, Model, NetConfig, SceneInputs};
use crate::scenario::synth::{synth_scenario, MapTemplate, SynthSpec};
use crate::scenario::{normalize_to_target, read_scenario, write_scenario, Scenario};
use crate::training::{load_model, train, TrainConfig, TrainOutputs, TrainSet};

#[derive(Debug, Parser)]
#[command(name = "dsp", version, about = "Dual-scale graph motion forecasting")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Threads for per-scenario stages.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic scenario files.
    Synth(SynthArgs),
    /// Write DA, LS and inter-layer edge dumps for one scenario.
    BuildGraph(BuildGraphArgs),
    /// Train a model on a split directory.
    Train(TrainArgs),
    /// Write a prediction file for one or more scenarios.
    Predict(PredictArgs),
    /// Score a checkpoint on a split.
    Eval(EvalArgs),
    /// Render scenes (and predictions, with a checkpoint) as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Map template; round-robin over all templates when omitted.
    #[arg(long, value_enum)]
    pub template: Option<MapTemplate>,
    #[arg(long, default_value_t = 32)]
    pub n: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildGraphArgs {
    pub scenario: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory of training scenarios.
    #[arg(long)]
    pub split: PathBuf,
    /// Held-out scenarios for model selection.
    #[arg(long)]
    pub val: Option<PathBuf>,
    /// Run directory (manifest, log, checkpoints).
    #[arg(long)]
    pub out: PathBuf,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Scenario files or directories.
    #[arg(required = true)]
    pub scenarios: Vec<PathBuf>,
    #[arg(long, value_enum, default_value_t = DecoderKind::Nn)]
    pub decoder: DecoderKind,
    /// Prediction file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory (or file) of scenarios with ground truth.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, value_enum, default_value_t = DecoderKind::Nn)]
    pub decoder: DecoderKind,
    /// JSON report file; the table is always printed.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write one SVG per scenario here.
    #[arg(long)]
    pub plots: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Scenario files or directories.
    #[arg(required = true)]
    pub scenarios: Vec<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = DecoderKind::Nn)]
    pub decoder: DecoderKind,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything a run depends on; loaded from TOML, every section optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: usize,
    pub network: NetConfig,
    pub graphs: GraphConfig,
    pub training: TrainConfig,
    pub synth: SynthSpec,
    pub nms: NmsConfig,
    pub kmeans: KmeansConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: 1,
            network: NetConfig::default(),
            graphs: GraphConfig::default(),
            training: TrainConfig::default(),
            synth: SynthSpec::default(),
            nms: NmsConfig::default(),
            kmeans: KmeansConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DspError::io(path, e))?;
        toml::from_str(&text).map_err(|e| DspError::parse(path.display().to_string(), e.to_string()))
    }

    /// File values (or defaults) with command-line overrides applied.
    pub fn resolve(cli: &Cli) -> Result<Self> {
        let mut c = match &cli.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = cli.seed {
            c.seed = s;
        }
        if let Some(w) = cli.workers {
            c.workers = w;
        }
        c.training.seed = c.seed;
        if c.workers == 0 {
            return Err(DspError::InvalidConfig("--workers must be at least 1".into()));
        }
        Ok(c)
    }

    pub fn decoder(&self, kind: DecoderKind, m: usize) -> DecoderSettings {
        DecoderSettings {
            kind,
            nms: NmsConfig { m, ..self.nms },
            kmeans: KmeansConfig { m, ..self.kmeans },
        }
    }
}

/// Written to the run directory before training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: RunConfig,
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub train_split: PathBuf,
    pub val_split: Option<PathBuf>,
    pub resumed_from: Option<PathBuf>,
    pub tool_version: String,
}

/// Seed of the `i`-th synthesized scenario.
pub fn scenario_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64)
}

/// `*.json` files of a directory in name order, or the path itself.
pub fn scenario_paths(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.is_dir() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut out = Vec::new();
    for e in std::fs::read_dir(path).map_err(|e| DspError::io(path, e))? {
        let p = e.map_err(|e| DspError::io(path, e))?.path();
        if p.extension().is_some_and(|x| x == "json") {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(DspError::InvalidConfig(format!("no scenario files in {}", path.display())));
    }
    Ok(out)
}

/// Reads scenarios and moves each into its target frame.
pub fn load_scenarios(paths: &[PathBuf]) -> Result<Vec<(String, Scenario)>> {
    let mut out = Vec::new();
    for root in paths {
        for p in scenario_paths(root)? {
            let s = normalize_to_target(&read_scenario(&p)?)?;
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            out.push((name, s));
        }
    }
    Ok(out)
}

fn check_horizon(cfg: &NetConfig, scenes: &[(String, Scenario)]) -> Result<()> {
    for (name, s) in scenes {
        if s.horizon.t != cfg.t_obs || s.horizon.h != cfg.h_pred {
            return Err(DspError::InvalidConfig(format!(
                "{name}: horizon T={} H={} does not match the network (T={}, H={})",
                s.horizon.t, s.horizon.h, cfg.t_obs, cfg.h_pred
            )));
        }
    }
    Ok(())
}

fn build_inputs(scenes: &[(String, Scenario)], g: &GraphConfig) -> Result<Vec<SceneInputs>> {
    use rayon::prelude::*;
    scenes.par_iter().map(|(_, s)| SceneInputs::build(s, g)).collect()
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| DspError::io(p, e))
}

fn write_text(p: &Path, text: &str) -> Result<()> {
    std::fs::write(p, text).map_err(|e| DspError::io(p, e))
}

fn to_json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("plain data serializes")
}

fn load_checkpoint_model(path: &Path) -> Result<Model> {
    load_model(path).map(|(m, _, _)| m)
}

pub fn cmd_synth(cfg: &RunConfig, a: &SynthArgs) -> Result<Vec<PathBuf>> {
    create_dir(&a.out)?;
    let mut written = Vec::with_capacity(a.n);
    for i in 0..a.n {
        let template = a.template.unwrap_or(MapTemplate::ALL[i % MapTemplate::ALL.len()]);
        let spec = SynthSpec {
            template,
            ..cfg.synth.clone()
        };
        let s = synth_scenario(&spec, scenario_seed(cfg.seed, i))?;
        let p = a.out.join(format!("scenario_{i:05}.json"));
        write_scenario(&s, &p)?;
        written.push(p);
    }
    Ok(written)
}

pub fn cmd_build_graph(cfg: &RunConfig, a: &BuildGraphArgs) -> Result<()> {
    let s = normalize_to_target(&read_scenario(&a.scenario)?)?;
    let inp = SceneInputs::build(&s, &cfg.graphs)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("da_graph.json"), &inp.da.debug_dump())?;
    write_text(&a.out.join("ls_graph.json"), &inp.ls.debug_dump())?;
    write_text(&a.out.join("interlayer_edges.json"), &to_json(&inp.edges))?;
    println!(
        "{} DA nodes, {} LS nodes, {} agents",
        inp.da.len(),
        inp.ls.len(),
        inp.n_agents()
    );
    Ok(())
}

pub fn cmd_train(cfg: &RunConfig, a: &TrainArgs) -> Result<()> {
    let mut tcfg = cfg.training;
    if let Some(e) = a.epochs {
        tcfg.epochs = e;
    }
    let (mut model, start, best) = match &a.checkpoint {
        Some(p) => load_model(p)?,
        None => (Model::new(cfg.network, cfg.seed)?, 0, None),
    };
    let train_scenes = load_scenarios(std::slice::from_ref(&a.split))?;
    check_horizon(&model.cfg, &train_scenes)?;
    let val = match &a.val {
        Some(v) => {
            let scenes = load_scenarios(std::slice::from_ref(v))?;
            check_horizon(&model.cfg, &scenes)?;
            build_inputs(&scenes, &cfg.graphs)?
        }
        None => Vec::new(),
    };
    create_dir(&a.out)?;
    let best_path = a.out.join("best.json");
    let manifest = RunManifest {
        config: RunConfig {
            network: model.cfg,
            training: tcfg,
            ..cfg.clone()
        },
        seed: cfg.seed,
        checkpoint: best_path.clone(),
        train_split: a.split.clone(),
        val_split: a.val.clone(),
        resumed_from: a.checkpoint.clone(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
    };
    write_text(&a.out.join("manifest.json"), &to_json(&manifest))?;
    let set = TrainSet::new(
        train_scenes.into_iter().map(|(_, s)| s).collect(),
        cfg.graphs,
        tcfg.augment,
    )?;
    let outputs = TrainOutputs {
        log: Some(a.out.join("train_log.jsonl")),
        best: Some(best_path),
        last: Some(a.out.join("last.json")),
    };
    let out = train(&mut model, &set, &val, &tcfg, start, best, &outputs)?;
    if let Some(r) = out.records.last() {
        println!("finished epoch {} with training loss {:.4}", r.epoch, r.train_loss.total);
    }
    if val.is_empty() {
        // no held-out split: the final weights are the selected ones
        std::fs::copy(a.out.join("last.json"), a.out.join("best.json"))
            .map_err(|e| DspError::io(a.out.join("best.json"), e))?;
    }
    Ok(())
}

pub fn cmd_predict(cfg: &RunConfig, a: &PredictArgs) -> Result<PredictionSet> {
    let model = load_checkpoint_model(&a.checkpoint)?;
    let scenes = load_scenarios(&a.scenarios)?;
    check_horizon(&model.cfg, &scenes)?;
    let inputs = build_inputs(&scenes, &cfg.graphs)?;
    let preds = predict_scenes(&model, &inputs, &cfg.decoder(a.decoder, model.cfg.m_headers))?;
    let set = PredictionSet {
        schema_version: PREDICTION_SCHEMA_VERSION,
        decoder: a.decoder,
        scenarios: scenes.into_iter().map(|(n, _)| n).collect(),
        predictions: preds,
    };
    set.save(&a.out)?;
    Ok(set)
}

fn split_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "split".into())
}

pub fn cmd_eval(cfg: &RunConfig, a: &EvalArgs) -> Result<Vec<ReportRow>> {
    let model = load_checkpoint_model(&a.checkpoint)?;
    let scenes = load_scenarios(std::slice::from_ref(&a.split))?;
    check_horizon(&model.cfg, &scenes)?;
    for (name, s) in &scenes {
        if s.target()?.gt_future.is_none() {
            log::error!("{name} has no ground-truth future");
            return Err(DspError::MissingGtFuture);
        }
    }
    let inputs = build_inputs(&scenes, &cfg.graphs)?;
    let preds = predict_scenes(&model, &inputs, &cfg.decoder(a.decoder, model.cfg.m_headers))?;
    let summary = summarize(&inputs, &preds)?;
    let rows = report_rows(&split_name(&a.split), a.decoder, model.cfg.m_headers, &summary);
    print!("{}", format_report(&rows));
    if let Some(out) = &a.out {
        write_text(out, &to_json(&rows))?;
    }
    if let Some(dir) = &a.plots {
        create_dir(dir)?;
        for ((name, _), (s, p)) in scenes.iter().zip(inputs.iter().zip(&preds)) {
            write_text(&dir.join(format!("{name}.svg")), &plot_svg(s, Some(p)))?;
        }
    }
    Ok(rows)
}

pub fn cmd_plot(cfg: &RunConfig, a: &PlotArgs) -> Result<()> {
    let scenes = load_scenarios(&a.scenarios)?;
    let inputs = build_inputs(&scenes, &cfg.graphs)?;
    let preds = match &a.checkpoint {
        Some(c) => {
            let model = load_checkpoint_model(c)?;
            check_horizon(&model.cfg, &scenes)?;
            Some(predict_scenes(&model, &inputs, &cfg.decoder(a.decoder, model.cfg.m_headers))?)
        }
        None => None,
    };
    create_dir(&a.out)?;
    for (i, ((name, _), s)) in scenes.iter().zip(&inputs).enumerate() {
        let p = preds.as_ref().map(|v| &v[i]);
        write_text(&a.out.join(format!("{name}.svg")), &plot_svg(s, p))?;
    }
    Ok(())
}

/// Runs a parsed command line.
pub fn execute(cli: &Cli) -> Result<()> {
    let cfg = RunConfig::resolve(cli)?;
    // a global pool can only be installed once per process; later calls keep the first
    let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.workers).build_global();
    match &cli.command {
        Command::Synth(a) => {
            let files = cmd_synth(&cfg, a)?;
            println!("wrote {} scenarios to {}", files.len(), a.out.display());
        }
        Command::BuildGraph(a) => cmd_build_graph(&cfg, a)?,
        Command::Train(a) => cmd_train(&cfg, a)?,
        Command::Predict(a) => {
            let set = cmd_predict(&cfg, a)?;
            println!("wrote {} predictions to {}", set.predictions.len(), a.out.display());
        }
        Command::Eval(a) => {
            cmd_eval(&cfg, a)?;
        }
        Command::Plot(a) => cmd_plot(&cfg, a)?,
    }
    Ok(())
}

/// Entry point of the `dsp` binary; returns the process exit code.
pub fn run() -> i32 {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// Verifies a checkpoint file without building a model.
pub fn verify_checkpoint(path: &Path) -> Result<()> {
    let ck = Checkpoint::load(path)?;
    crate::autodiff::ParamStore::from_checkpoint(&ck).map(|_| ())
}
