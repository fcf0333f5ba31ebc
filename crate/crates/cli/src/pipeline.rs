//! Initialization and adaptation runs as driven by the `init` and `adapt`
//! subcommands, plus the on-disk layout of their outputs.

use std::path::{Path, PathBuf};

use mode_core::engine::{run_ctta, DataHandle, InitData, InitMode, Method, ModelAssembly, TtaEngine};
use mode_core::metrics::RoundMetrics;
use mode_core::scenario::{make_cds, make_cgs, make_sda, make_source, Sample, Scenario};
use mode_core::CounterRng;

use crate::checkpoint::{Checkpoint, State};
use crate::config::{ExperimentConfig, ScenarioKind};
use crate::error::{CliError, Result};
use crate::report::{expert_csv, metrics_csv, summary_json, RunSummary};
use crate::write_file;

const SEED_SOURCE: u64 = 1;
const SEED_TARGET: u64 = 2;
const SEED_SCHEDULE: u64 = 3;

fn derive(seed: u64, stream: u64) -> u64 {
    CounterRng::new(seed).split(stream).next_u64()
}

pub fn method_name(m: Method) -> &'static str {
    match m {
        Method::Mode => "mode",
        Method::Frozen => "frozen",
        Method::FullEntropy => "full_entropy",
    }
}

pub fn source_data(cfg: &ExperimentConfig, seed: u64) -> Result<Vec<Sample>> {
    let m = &cfg.model;
    Ok(make_source(derive(seed, SEED_SOURCE), cfg.data.source_samples, m.classes, m.input_dim, cfg.data.separation)?)
}

/// The target stream for `seed`, with its labeled evaluation split.
pub fn scenario(cfg: &ExperimentConfig, seed: u64) -> Result<Scenario> {
    let m = &cfg.model;
    let d = &cfg.data;
    let domains = &cfg.target_domains;
    let pool = make_source(derive(seed, SEED_TARGET), d.per_domain * domains.len(), m.classes, m.input_dim, d.separation)?;
    Ok(match cfg.scenario {
        ScenarioKind::Cds => make_cds(&pool, domains, d.per_domain, cfg.rounds)?,
        ScenarioKind::Cgs => make_cgs(
            &pool,
            domains,
            d.per_domain * domains.len(),
            d.cgs_std,
            cfg.rounds,
            derive(seed, SEED_SCHEDULE),
        )?,
    })
}

/// Trains the source model and runs the configured initialization.
pub fn init_model(cfg: &ExperimentConfig, seed: u64) -> Result<ModelAssembly> {
    let mut model = ModelAssembly::new(cfg.model.clone(), seed)?;
    let source = source_data(cfg, seed)?;
    model.train_source(&source, &cfg.source, seed)?;
    let adaptation = cfg.adaptation_for(seed, cfg.adaptation.method);
    let data = match adaptation.init_mode {
        InitMode::Random => InitData::None,
        InitMode::SourceOnly => InitData::Source(DataHandle::new(source)),
        InitMode::Sda => {
            let sda = make_sda(&source[..cfg.data.sda_samples], &cfg.sda_domains)?;
            drop(source);
            InitData::Sda(DataHandle::new(sda))
        }
    };
    model.init_phase(&adaptation, data)?;
    Ok(model)
}

pub fn init_checkpoint_path(cfg: &ExperimentConfig, seed: u64) -> PathBuf {
    cfg.run_dir().join(format!("s{seed}")).join("init.json")
}

pub fn final_checkpoint_path(cfg: &ExperimentConfig, seed: u64, method: Method) -> PathBuf {
    cfg.run_dir().join(format!("s{seed}")).join(format!("{}.final.json", method_name(method)))
}

pub fn metrics_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run_dir().join("metrics.csv")
}

pub fn summary_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.run_dir().join("summary.json")
}

/// Initializes one model per seed and writes its checkpoint. Returns
/// `(seed, MoDE parameter count)` pairs.
pub fn cmd_init(cfg: &ExperimentConfig) -> Result<Vec<(u64, usize)>> {
    let hash = cfg.hash();
    let mut counts = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let model = init_model(cfg, seed)?;
        counts.push((seed, model.mode_param_count()));
        Checkpoint::new(hash.clone(), seed, State::Initialized { model }).save(&init_checkpoint_path(cfg, seed))?;
    }
    Ok(counts)
}

/// Loads an initialized model, refusing one made under another config.
pub fn load_initialized(cfg: &ExperimentConfig, path: &Path, seed: u64) -> Result<ModelAssembly> {
    let ck = Checkpoint::load(path)?;
    ck.check_hash(&cfg.hash())?;
    if ck.seed != seed {
        return Err(CliError::Config(format!("checkpoint is for seed {}, expected {}", ck.seed, seed)));
    }
    match ck.state {
        State::Initialized { model } => Ok(model),
        State::Adapted { .. } => Err(CliError::Data(format!("{} is not an initialized checkpoint", path.display()))),
    }
}

/// Every configured method on one seed's scenario.
pub fn adapt_seed(cfg: &ExperimentConfig, seed: u64, model: &ModelAssembly) -> Result<Vec<(Method, TtaEngine, RoundMetrics)>> {
    let sc = scenario(cfg, seed)?;
    cfg.methods()
        .into_iter()
        .map(|method| {
            let mut engine = TtaEngine::new(model.clone(), cfg.adaptation_for(seed, method))?;
            let metrics = run_ctta(&mut engine, &sc, cfg.rounds)?;
            Ok((method, engine, metrics))
        })
        .collect()
}

pub fn run_label(cfg: &ExperimentConfig, method: Method, seed: u64) -> String {
    format!("{}-{}-s{}", cfg.run_id, method_name(method), seed)
}

/// Adapts every seed from its init checkpoint and writes metrics, summary,
/// expert-frequency tables and final checkpoints. `checkpoint` overrides
/// the init checkpoint location when there is a single seed.
pub fn cmd_adapt(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Vec<RunSummary>> {
    if checkpoint.is_some() && cfg.seeds.len() != 1 {
        return Err(CliError::Config("--checkpoint needs a config with exactly one seed".into()));
    }
    let hash = cfg.hash();
    let domains: Vec<String> = cfg.target_domains.iter().map(|d| d.name.clone()).collect();
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        let path = checkpoint.map_or_else(|| init_checkpoint_path(cfg, seed), Path::to_path_buf);
        let model = load_initialized(cfg, &path, seed)?;
        for (method, engine, metrics) in adapt_seed(cfg, seed, &model)? {
            let summary = RunSummary::new(run_label(cfg, method, seed), method, seed, domains.clone(), &metrics)?;
            for (layer, table) in summary.expert_freq.iter().enumerate() {
                if engine.model.mode_layers[layer].is_some() && method != Method::FullEntropy {
                    let name = format!("{}-s{}-layer{}.csv", method_name(method), seed, layer);
                    write_file(&cfg.run_dir().join("experts").join(name), expert_csv(table).as_bytes())?;
                }
            }
            Checkpoint::new(hash.clone(), seed, State::Adapted { engine }).save(&final_checkpoint_path(cfg, seed, method))?;
            runs.push(summary);
        }
    }
    write_file(&metrics_path(cfg), metrics_csv(&runs).as_bytes())?;
    write_file(&summary_path(cfg), summary_json(&runs)?.as_bytes())?;
    Ok(runs)
}
