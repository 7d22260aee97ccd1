//! Builds a run from a config, executes it and writes its artifacts.

use std::path::{Path, PathBuf};

use crate::autodiff::Model;
use crate::config::{ExperimentConfig, RunManifest, RunSeeds};
use crate::data::{make_blobs, partition, Dataset, PartitionSpec};
use crate::engine::{run_round, EngineConfig, GlobalState, RoundPlan, SynthesisEvent};
use crate::error::{Error, Result};
use crate::hfmds::write_dump;
use crate::metrics::{export_features, metrics_csv, MetricsRow};
use crate::seed::stream;

pub struct Simulation {
    pub config: ExperimentConfig,
    pub seeds: RunSeeds,
    pub state: GlobalState,
    /// Full training pool before partitioning.
    pub train: Dataset,
    engine: EngineConfig,
}

impl Simulation {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seeds = RunSeeds::derive(config.seed, config.clients);
        let blobs = make_blobs(&config.dataset, seeds.dataset)?;
        let shards = partition(
            &blobs.train,
            &PartitionSpec {
                scheme: config.partition.clone(),
                clients: config.clients,
                seed: seeds.partition,
            },
        )?;
        let model = Model::init(config.architecture(), &mut stream(seeds.model_init))?;
        let state = GlobalState::new(model, shards, blobs.test, seeds.engine.clone())?;
        Ok(Simulation {
            engine: config.engine(),
            config: config.clone(),
            seeds,
            state,
            train: blobs.train,
        })
    }

    pub fn finished(&self) -> bool {
        self.state.round > self.engine.rounds
    }

    pub fn step(&mut self) -> Result<RoundPlan> {
        if self.finished() {
            return Err(Error::contract("all rounds already executed"));
        }
        run_round(&mut self.state, &self.engine)
    }

    pub fn metrics(&self) -> &[MetricsRow] {
        &self.state.metrics
    }

    pub fn events(&self) -> &[SynthesisEvent] {
        &self.state.events
    }
}

/// Result of an in-memory run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunOutcome {
    pub metrics: Vec<MetricsRow>,
    pub events: Vec<SynthesisEvent>,
    pub final_accuracy: f64,
    /// Computed for every algorithm, including those that leave the
    /// per-round column empty.
    pub final_alignment: Option<f64>,
    pub final_model: Model,
}

/// Runs every round without touching the filesystem.
pub fn simulate(config: &ExperimentConfig) -> Result<RunOutcome> {
    let mut sim = Simulation::new(config)?;
    while !sim.finished() {
        sim.step()?;
    }
    outcome(&sim)
}

fn outcome(sim: &Simulation) -> Result<RunOutcome> {
    Ok(RunOutcome {
        metrics: sim.state.metrics.clone(),
        events: sim.state.events.clone(),
        final_accuracy: sim.state.metrics.last().map_or(0.0, |r| r.accuracy),
        final_alignment: sim.state.alignment()?,
        final_model: sim.state.model.clone(),
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn relative(out: &Path, path: &Path) -> String {
    path.strip_prefix(out).unwrap_or(path).to_string_lossy().replace('\\', "/")
}

/// Executes the run and writes `metrics.csv`, `manifest.json`, synthetic
/// dumps under `synth/round_NNNN/` and `features.csv` into the output dir.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunManifest> {
    let out = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let mut sim = Simulation::new(config)?;
    let mut artifacts = Vec::new();
    while !sim.finished() {
        let plan = sim.step()?;
        log::debug!("round {} done", plan.round);
        if plan.synthesis_due && config.dump_synthetic {
            let dir = out.join("synth").join(format!("round_{:04}", plan.round));
            for (part, client) in sim.state.last_synthesis.iter().zip(&sim.state.clients) {
                for p in write_dump(&dir, part, client.shard(), config.syn_size, config.mu, config.lambda)? {
                    artifacts.push(relative(&out, &p));
                }
            }
        }
    }
    let result = outcome(&sim)?;

    let metrics_path = out.join("metrics.csv");
    write(&metrics_path, &metrics_csv(&result.metrics))?;
    artifacts.push("metrics.csv".into());
    if config.export_features {
        let path = out.join("features.csv");
        let syn = Some(&sim.state.synthetic).filter(|s| !s.is_empty());
        export_features(&result.final_model, &sim.train, syn, &path)?;
        artifacts.push("features.csv".into());
    }
    artifacts.push("manifest.json".into());
    artifacts.sort();

    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").into(),
        config: config.clone(),
        seeds: sim.seeds.clone(),
        artifacts,
        synthesis_events: result.events,
        final_accuracy: result.final_accuracy,
        final_alignment: result.final_alignment,
    };
    write(&out.join("manifest.json"), &manifest.to_json())?;
    Ok(manifest)
}
