//! End-to-end pipeline: data → split → topology → solver → evaluation → files.

use std::path::Path;
use std::time::Instant;

use serde_json::json;

use crate::centralized::{central_run, CentralConfig};
use crate::config::{DataSource, ExperimentConfig, TopologySpec};
use crate::data::{load_ratings, partition_columns, split, split_stratified, synth_low_rank, SplitDataset};
use crate::engine::{BusObserver, RunOutcome, Simulation};
use crate::error::Result;
use crate::eval::{maps, BlockModel, RankingResult};
use crate::factors::FactorDump;
use crate::io::write_atomic;
use crate::metrics::{to_csv, IterationMetrics};
use crate::topology::{complete, erdos_renyi, load_topology, ring, Topology};
use crate::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Solver {
    Decentralized,
    Centralized,
}

impl Solver {
    fn name(self) -> &'static str {
        match self {
            Solver::Decentralized => "decentralized",
            Solver::Centralized => "centralized",
        }
    }
}

#[derive(Debug)]
pub struct RunReport {
    pub solver: Solver,
    pub metrics: Vec<IterationMetrics>,
    pub outcome: RunOutcome,
    pub model: BlockModel,
    pub ranking: std::result::Result<RankingResult, String>,
    pub wall_ms: u128,
}

/// Loads or generates the ratings and splits them into train and test.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<SplitDataset> {
    let ratings = match &cfg.data {
        DataSource::Synthetic { .. } => {
            synth_low_rank(&cfg.synth_spec().expect("synthetic source has a spec"))?.0
        }
        DataSource::File(path) => load_ratings(path)?.ratings,
    };
    cfg.validate_shape(ratings.users(), ratings.items())?;
    if cfg.stratified {
        split_stratified(&ratings, cfg.split_fraction, cfg.split_seed())
    } else {
        split(&ratings, cfg.split_fraction, cfg.split_seed())
    }
}

pub fn build_topology(cfg: &ExperimentConfig) -> Result<Topology> {
    let t = match &cfg.topology {
        TopologySpec::Ring => ring(cfg.agents)?,
        TopologySpec::Complete => complete(cfg.agents)?,
        TopologySpec::ErdosRenyi { p, .. } => erdos_renyi(cfg.agents, *p, cfg.topology_seed())?,
        TopologySpec::File(path) => load_topology(path)?,
    };
    if t.agents() != cfg.agents {
        return Err(Error::config(format!(
            "topology has {} agents, topology.agents is {}",
            t.agents(),
            cfg.agents
        )));
    }
    Ok(t)
}

/// Runs the configured pipeline in memory.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    solver: Solver,
    observer: Option<&mut (dyn BusObserver + '_)>,
) -> Result<RunReport> {
    let started = Instant::now();
    let data = prepare_data(cfg)?;
    let engine_cfg = cfg.engine_config();
    let mut rows = Vec::new();

    let (model, outcome) = match solver {
        Solver::Decentralized => {
            let topology = build_topology(cfg)?;
            let shards = partition_columns(&data.train, cfg.agents)?;
            let mut sim = Simulation::new(shards, topology, engine_cfg)?.with_test(&data.test)?;
            let outcome = sim.run(&mut rows, observer)?;
            let model = if cfg.averaged_u {
                BlockModel::averaged_from_agents(sim.agents())?
            } else {
                BlockModel::from_agents(sim.agents())?
            };
            (model, outcome)
        }
        Solver::Centralized => {
            let (state, outcome) = central_run(
                &data.train,
                Some(&data.test),
                &CentralConfig::from(&engine_cfg),
                &mut rows,
            )?;
            let n = state.v.cols();
            (BlockModel::new(vec![((0, n), state.u, state.v)])?, outcome)
        }
    };

    let ranking = maps(&model, &data.test, cfg.like_threshold).map_err(|e| e.to_string());
    Ok(RunReport {
        solver,
        metrics: rows,
        outcome,
        model,
        ranking,
        wall_ms: started.elapsed().as_millis(),
    })
}

pub fn summary_json(cfg: &ExperimentConfig, report: &RunReport) -> serde_json::Value {
    let last = report.metrics.last();
    let ranking = match &report.ranking {
        Ok(r) => json!({
            "maps": r.maps,
            "counted_users": r.counted_users,
            "excluded_users": r.excluded_users,
        }),
        Err(e) => json!({ "error": e }),
    };
    let topology = match &cfg.topology {
        TopologySpec::Ring => "ring",
        TopologySpec::Complete => "complete",
        TopologySpec::ErdosRenyi { .. } => "erdos_renyi",
        TopologySpec::File(_) => "file",
    };
    json!({
        "solver": report.solver.name(),
        "iterations_run": report.outcome.iterations,
        "stopped_early": report.outcome.stopped_early,
        "final": last.map(|m| json!({
            "objective": m.objective,
            "train_rmse": m.train_rmse,
            "test_rmse": m.test_rmse,
            "consensus_gap": m.consensus_gap,
            "dual_sum_norm": m.dual_sum_norm,
        })),
        "ranking": ranking,
        "flags": {
            "mode": cfg.engine.mode.to_string(),
            "schedule": cfg.engine.schedule.to_string(),
            "agents": cfg.agents,
            "topology": topology,
            "averaged_u": cfg.averaged_u,
        },
        "wall_ms": report.wall_ms as u64,
        "defaulted_keys": cfg.defaulted,
        "config": cfg.to_ini(),
    })
}

/// Writes `metrics.csv`, `summary.json` and optionally `factors/factors.json`
/// under `cfg.output_dir`, each atomically.
pub fn write_outputs(cfg: &ExperimentConfig, report: &RunReport) -> Result<()> {
    let dir = &cfg.output_dir;
    write_atomic(&dir.join("metrics.csv"), to_csv(&report.metrics, cfg.timing).as_bytes())?;
    if cfg.write_factors {
        write_atomic(
            &dir.join("factors").join("factors.json"),
            FactorDump::from_model(&report.model).to_json().as_bytes(),
        )?;
    }
    let summary = serde_json::to_string_pretty(&summary_json(cfg, report))
        .expect("summary serializes");
    write_atomic(&dir.join("summary.json"), summary.as_bytes())
}

/// Pulls the echoed configuration text back out of a `summary.json`.
pub fn config_from_summary(path: &Path) -> Result<String> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    value
        .get("config")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| Error::data("summary has no config echo"))
}
