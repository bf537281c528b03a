//! Centralized block-coordinate solver for
//! `min ½‖UV − Z‖²_F  s.t.  Z = R on the observed set`.
//!
//! It performs the same V and Z updates as a single decentralized agent and
//! the exact least-squares U-update `U = ZVᵀ(VVᵀ)⁻¹`, so with one agent and
//! the exact U-mode the two solvers produce the same iterates.

use std::time::Instant;

use crate::data::RatingMatrix;
use crate::engine::{random_factor, solve_with_retry, EngineConfig, RunOutcome};
use crate::error::{Error, Result, Site, Step};
use crate::matrix::{masked_assign, Dense, MaskedIndexSet};
use crate::metrics::{IterationMetrics, MetricSink};

#[derive(Debug, Clone, PartialEq)]
pub struct CentralConfig {
    pub rank: usize,
    /// 0 returns the initialization untouched.
    pub iterations: usize,
    pub ridge: f64,
    pub init_scale: Option<f64>,
    pub seed: u64,
    /// Stop once `|f_prev − f| / (1 + f_prev)` drops below this.
    pub stop_tolerance: Option<f64>,
}

impl From<&EngineConfig> for CentralConfig {
    fn from(c: &EngineConfig) -> Self {
        CentralConfig {
            rank: c.rank,
            iterations: c.iterations,
            ridge: c.ridge,
            init_scale: c.init_scale,
            seed: c.seed,
            stop_tolerance: c.stop_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralState {
    pub u: Dense,
    pub v: Dense,
    pub z: Dense,
}

impl CentralState {
    /// Same initialization as agent 0 of the decentralized engine with the same seed.
    pub fn init(ratings: &RatingMatrix, config: &CentralConfig) -> Result<Self> {
        let (m, n, r) = (ratings.users(), ratings.items(), config.rank);
        if r == 0 || r > m {
            return Err(Error::config(format!(
                "rank must be in 1..={m} (user count), got {r}"
            )));
        }
        let scale = config
            .init_scale
            .unwrap_or_else(|| 1.0 / (r as f64).sqrt());
        Ok(CentralState {
            u: random_factor(m, r, scale, config.seed, 0)?,
            v: Dense::zeros(r, n),
            z: masked_assign(&Dense::zeros(m, n), &ratings.mask(), &ratings.values())?,
        })
    }

    pub fn objective(&self) -> f64 {
        0.5 * self
            .u
            .matmul(&self.v)
            .expect("factor shapes agree")
            .sub(&self.z)
            .squared_norm()
    }

    pub fn predict(&self, user: usize, item: usize) -> f64 {
        let mut s = 0.0;
        for (k, &x) in self.u.row(user).iter().enumerate() {
            s += x * self.v.get(k, item);
        }
        s
    }

    fn rmse(&self, entries: &RatingMatrix) -> Option<f64> {
        if entries.is_empty() {
            return None;
        }
        let sq: f64 = entries
            .entries()
            .iter()
            .map(|e| {
                let d = self.predict(e.user, e.item) - e.value;
                d * d
            })
            .sum();
        Some((sq / entries.len() as f64).sqrt())
    }
}

fn site(step: Step, iteration: usize) -> Site {
    Site {
        agent: None,
        step,
        iteration,
    }
}

/// One V → Z → U sweep, each block solved exactly.
pub fn central_step(
    state: &mut CentralState,
    mask: &MaskedIndexSet,
    observed: &[f64],
    ridge: f64,
    iteration: usize,
) -> Result<()> {
    let rhs = state.u.t_matmul(&state.z)?;
    state.v = solve_with_retry(&state.u.gram(), &rhs, ridge, site(Step::V, iteration))?;

    state.z = masked_assign(&state.u.matmul(&state.v)?, mask, observed)?;

    let rhs = state.z.matmul_t(&state.v)?;
    let system = state.v.matmul_t(&state.v)?;
    state.u = solve_with_retry(&system, &rhs.transpose(), ridge, site(Step::U, iteration))?
        .transpose();

    for (m, step) in [(&state.v, Step::V), (&state.z, Step::Z), (&state.u, Step::U)] {
        if !m.is_finite() {
            return Err(Error::NonFinite {
                site: site(step, iteration),
            });
        }
    }
    Ok(())
}

fn row(state: &CentralState, train: &RatingMatrix, test: Option<&RatingMatrix>, t: usize, ms: u64) -> IterationMetrics {
    IterationMetrics {
        iteration: t,
        objective: state.objective(),
        train_rmse: state.rmse(train).unwrap_or(0.0),
        test_rmse: test.and_then(|t| state.rmse(t)),
        consensus_gap: 0.0,
        dual_sum_norm: 0.0,
        wall_ms: ms,
    }
}

/// Runs the oracle from its standard initialization.
pub fn central_run(
    train: &RatingMatrix,
    test: Option<&RatingMatrix>,
    config: &CentralConfig,
    sink: &mut dyn MetricSink,
) -> Result<(CentralState, RunOutcome)> {
    let state = CentralState::init(train, config)?;
    central_run_from(state, train, test, config, sink)
}

/// Runs the oracle from a caller-supplied state.
pub fn central_run_from(
    mut state: CentralState,
    train: &RatingMatrix,
    test: Option<&RatingMatrix>,
    config: &CentralConfig,
    sink: &mut dyn MetricSink,
) -> Result<(CentralState, RunOutcome)> {
    if let Some(t) = test {
        if (t.users(), t.items()) != (train.users(), train.items()) {
            return Err(Error::data("test and train matrices differ in shape"));
        }
    }
    let mask = train.mask();
    let observed = train.values();
    let started = Instant::now();
    let mut previous = state.objective();
    for t in 1..=config.iterations {
        central_step(&mut state, &mask, &observed, config.ridge, t)?;
        let metrics = row(&state, train, test, t, started.elapsed().as_millis() as u64);
        sink.record(&metrics);
        let rel = (previous - metrics.objective).abs() / (1.0 + previous);
        previous = metrics.objective;
        if config.stop_tolerance.is_some_and(|tol| rel < tol) {
            return Ok((
                state,
                RunOutcome {
                    iterations: t,
                    stopped_early: t < config.iterations,
                },
            ));
        }
    }
    Ok((
        state,
        RunOutcome {
            iterations: config.iterations,
            stopped_early: false,
        },
    ))
}
