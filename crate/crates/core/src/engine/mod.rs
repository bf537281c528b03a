//! Decentralized matrix completion.
//!
//! Each agent owns a column shard of the rating matrix plus a full-size
//! replica of the user factors. One iteration is a synchronous sweep:
//!
//! 1. every agent solves for its item factors `Vᵢ = (UᵢᵀUᵢ)⁻¹UᵢᵀZᵢ`;
//! 2. every agent refreshes its completed block `Zᵢ = UᵢVᵢ + P_Ω(Rᵢ − UᵢVᵢ)`;
//! 3. replicas `Uᵢ` are exchanged with one-hop neighbors;
//! 4. every agent updates `Uᵢ` toward its local fit and its neighbors' replicas;
//! 5. (double schedule) replicas are exchanged again;
//! 6. every agent accumulates its consensus residual into the dual `aᵢ`.
//!
//! A barrier separates the phases. Inside a phase agents run on a rayon
//! pool; all cross-agent reductions happen afterwards in agent order, so
//! the results do not depend on the worker count.

mod agent;
mod bus;

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;

pub use agent::{random_factor, AgentState};
pub(crate) use agent::solve_with_retry;
pub use bus::{
    exchange, BusObserver, BusRecorder, Envelope, ExchangeRound, Payload, PayloadKind,
    SnapshotTable,
};

use crate::data::{column_ranges, owner_of, Rating, RatingMatrix, Shard};
use crate::error::{Error, Result};
use crate::metrics::{IterationMetrics, MetricSink};
use crate::topology::Topology;

/// How the U-update combines the local fit with neighbor replicas.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateMode {
    /// `(ZVᵀ − a + βΣUⱼ) / (1 + 2β|N|)`: scalar denominator, no self term.
    Verbatim,
    /// Verbatim plus the `β|N|Uᵢ` self term, so agreeing replicas are a fixed point.
    Consensus,
    /// Exact minimizer: `U(VVᵀ + 2β|N|I) = ZVᵀ − a + β|N|Uᵢ + βΣUⱼ`.
    #[default]
    Exact,
}

/// Exchanges per iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ExchangeSchedule {
    /// One exchange; the dual step reuses the pre-update neighbor replicas.
    Single,
    /// A second exchange after the U-update so the dual step sees fresh replicas.
    #[default]
    Double,
}

macro_rules! keyword_enum {
    ($ty:ty, $($variant:path => $name:literal),+) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::config(format!(
                        "unknown {} {other:?}", stringify!($ty)
                    ))),
                }
            }
        }
    };
}

keyword_enum!(UpdateMode, UpdateMode::Verbatim => "verbatim", UpdateMode::Consensus => "consensus", UpdateMode::Exact => "exact");
keyword_enum!(ExchangeSchedule, ExchangeSchedule::Single => "single", ExchangeSchedule::Double => "double");

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub rank: usize,
    pub beta: f64,
    pub iterations: usize,
    pub mode: UpdateMode,
    pub schedule: ExchangeSchedule,
    /// Ridge for the retry after a failed factorization; 0 picks `1e-8·trace/dim`.
    pub ridge: f64,
    /// Standard deviation of the initial U entries; `None` means `1/√rank`.
    pub init_scale: Option<f64>,
    pub seed: u64,
    /// Stop once every agent's relative U-change falls below this.
    pub stop_tolerance: Option<f64>,
    /// Worker threads for per-agent phases; 0 lets rayon decide.
    pub workers: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            rank: 64,
            beta: 0.5,
            iterations: 500,
            mode: UpdateMode::Exact,
            schedule: ExchangeSchedule::Double,
            ridge: 0.0,
            init_scale: None,
            seed: 0,
            stop_tolerance: None,
            workers: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("rank must be at least 1"));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!("beta must be > 0, got {}", self.beta)));
        }
        if self.iterations == 0 {
            return Err(Error::config("iterations must be at least 1"));
        }
        if !(self.ridge >= 0.0 && self.ridge.is_finite()) {
            return Err(Error::config(format!("ridge must be >= 0, got {}", self.ridge)));
        }
        if let Some(s) = self.init_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::config(format!("init scale must be > 0, got {s}")));
            }
        }
        if let Some(t) = self.stop_tolerance {
            if t.is_nan() || t <= 0.0 {
                return Err(Error::config(format!("stop tolerance must be > 0, got {t}")));
            }
        }
        Ok(())
    }

    pub fn effective_init_scale(&self) -> f64 {
        self.init_scale
            .unwrap_or_else(|| 1.0 / (self.rank as f64).sqrt())
    }
}

/// Builds one agent per shard. Shards must come from `partition_columns`
/// with as many shards as the topology has agents.
pub fn init_agents(
    shards: Vec<Shard>,
    topology: &Topology,
    config: &EngineConfig,
) -> Result<Vec<AgentState>> {
    config.validate()?;
    if shards.len() != topology.agents() {
        return Err(Error::config(format!(
            "{} shards for a topology over {} agents",
            shards.len(),
            topology.agents()
        )));
    }
    let scale = config.effective_init_scale();
    shards
        .into_iter()
        .enumerate()
        .map(|(i, shard)| {
            if shard.agent != i {
                return Err(Error::config(format!("shard {i} is labelled agent {}", shard.agent)));
            }
            AgentState::new(shard, config.rank, scale, config.seed)
        })
        .collect()
}

/// Per-iteration metrics over the current agent states. `test` entries are
/// routed to the shard owning their column (local coordinates per agent).
pub fn metrics(
    agents: &[AgentState],
    topology: &Topology,
    test: Option<&[Vec<Rating>]>,
    iteration: usize,
    wall_ms: u64,
) -> IterationMetrics {
    let mut objective = 0.0;
    let mut train_sq = 0.0;
    let mut train_count = 0usize;
    for a in agents {
        objective += a.objective();
        train_sq += a.squared_error(a.shard().local.entries());
        train_count += a.shard().local.len();
    }
    let test_rmse = test.and_then(|per_agent| {
        let mut sq = 0.0;
        let mut count = 0usize;
        for (a, entries) in agents.iter().zip(per_agent) {
            sq += a.squared_error(entries);
            count += entries.len();
        }
        (count > 0).then(|| (sq / count as f64).sqrt())
    });
    let consensus_gap = topology
        .edges()
        .iter()
        .map(|&(i, j)| agents[i].u().sub(agents[j].u()).frob_norm())
        .fold(0.0, f64::max);
    let mut dual_sum = crate::matrix::Dense::zeros(agents[0].dual().rows(), agents[0].dual().cols());
    for a in agents {
        dual_sum.add_scaled(a.dual(), 1.0);
    }
    IterationMetrics {
        iteration,
        objective,
        train_rmse: if train_count > 0 {
            (train_sq / train_count as f64).sqrt()
        } else {
            0.0
        },
        test_rmse,
        consensus_gap,
        dual_sum_norm: dual_sum.frob_norm(),
        wall_ms,
    }
}

/// Splits global held-out entries into per-agent lists in local column coordinates.
pub fn route_entries(agents: &[AgentState], entries: &RatingMatrix) -> Result<Vec<Vec<Rating>>> {
    let ranges: Vec<(usize, usize)> = agents
        .iter()
        .map(|a| (a.shard().start, a.shard().end))
        .collect();
    let n = ranges.last().map_or(0, |r| r.1);
    if entries.items() != n || agents.first().map(|a| a.u().rows()) != Some(entries.users()) {
        return Err(Error::data(format!(
            "held-out matrix is {}x{}, agents cover {}x{n}",
            entries.users(),
            entries.items(),
            agents.first().map_or(0, |a| a.u().rows()),
        )));
    }
    debug_assert_eq!(column_ranges(n, agents.len()).ok().as_deref(), Some(&ranges[..]));
    let mut routed = vec![Vec::new(); agents.len()];
    for e in entries.entries() {
        let owner = owner_of(&ranges, e.item);
        routed[owner].push(Rating {
            item: e.item - ranges[owner].0,
            ..*e
        });
    }
    Ok(routed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOutcome {
    pub iterations: usize,
    pub stopped_early: bool,
}

/// A set of agents wired to a topology, plus the pool that runs their phases.
pub struct Simulation {
    agents: Vec<AgentState>,
    topology: Topology,
    config: EngineConfig,
    test: Option<Vec<Vec<Rating>>>,
    pool: rayon::ThreadPool,
}

impl fmt::Debug for Simulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Simulation")
            .field("agents", &self.agents.len())
            .field("topology", &self.topology)
            .field("config", &self.config)
            .finish()
    }
}

fn first_error<T>(results: Vec<Result<T>>) -> Result<Vec<T>> {
    results.into_iter().collect()
}

impl Simulation {
    pub fn new(shards: Vec<Shard>, topology: Topology, config: EngineConfig) -> Result<Self> {
        let agents = init_agents(shards, &topology, &config)?;
        Simulation::from_agents(agents, topology, config)
    }

    pub fn from_agents(
        agents: Vec<AgentState>,
        topology: Topology,
        config: EngineConfig,
    ) -> Result<Self> {
        config.validate()?;
        if agents.len() != topology.agents() {
            return Err(Error::config("agent count does not match topology"));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build()
            .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
        Ok(Simulation {
            agents,
            topology,
            config,
            test: None,
            pool,
        })
    }

    /// Held-out entries (global coordinates) used for the test RMSE column.
    pub fn with_test(mut self, test: &RatingMatrix) -> Result<Self> {
        self.test = Some(route_entries(&self.agents, test)?);
        Ok(self)
    }

    pub fn agents(&self) -> &[AgentState] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [AgentState] {
        &mut self.agents
    }

    pub fn into_agents(self) -> Vec<AgentState> {
        self.agents
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    /// One full sweep. Returns the largest relative U-change across agents.
    pub fn iterate(
        &mut self,
        iteration: usize,
        mut observer: Option<&mut (dyn BusObserver + '_)>,
    ) -> Result<f64> {
        let Simulation {
            agents,
            topology,
            config,
            pool,
            ..
        } = self;
        let cfg = &*config;

        pool.install(|| {
            first_error(
                agents
                    .par_iter_mut()
                    .map(|a| a.step_v(cfg.ridge, iteration))
                    .collect(),
            )?;
            first_error(
                agents
                    .par_iter_mut()
                    .map(|a| a.step_z(iteration))
                    .collect(),
            )?;
            Ok::<_, Error>(())
        })?;

        let before = exchange(
            agents,
            topology,
            iteration,
            ExchangeRound::PreUpdate,
            observer.as_deref_mut(),
        );
        let changes = pool.install(|| {
            first_error(
                agents
                    .par_iter_mut()
                    .map(|a| a.step_u(&before, cfg.beta, cfg.mode, cfg.ridge, iteration))
                    .collect(),
            )
        })?;

        let after = match cfg.schedule {
            ExchangeSchedule::Single => before,
            ExchangeSchedule::Double => exchange(
                agents,
                topology,
                iteration,
                ExchangeRound::PostUpdate,
                observer,
            ),
        };
        pool.install(|| {
            first_error(
                agents
                    .par_iter_mut()
                    .map(|a| a.step_dual(&after, cfg.beta, iteration))
                    .collect(),
            )
        })?;

        Ok(changes.into_iter().fold(0.0, f64::max))
    }

    pub fn metrics(&self, iteration: usize, wall_ms: u64) -> IterationMetrics {
        metrics(
            &self.agents,
            &self.topology,
            self.test.as_deref(),
            iteration,
            wall_ms,
        )
    }

    /// Runs up to `config.iterations` sweeps, emitting one metrics row per sweep.
    pub fn run(
        &mut self,
        sink: &mut dyn MetricSink,
        mut observer: Option<&mut (dyn BusObserver + '_)>,
    ) -> Result<RunOutcome> {
        let started = Instant::now();
        for t in 1..=self.config.iterations {
            let change = self.iterate(t, observer.as_deref_mut())?;
            sink.record(&self.metrics(t, started.elapsed().as_millis() as u64));
            if self.config.stop_tolerance.is_some_and(|tol| change < tol) {
                return Ok(RunOutcome {
                    iterations: t,
                    stopped_early: t < self.config.iterations,
                });
            }
        }
        Ok(RunOutcome {
            iterations: self.config.iterations,
            stopped_early: false,
        })
    }
}

#[cfg(test)]
mod tests;
