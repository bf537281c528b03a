//! The simulated message bus. The only payload type that exists is a U
//! replica; agents' item factors, completed matrices, ratings and duals
//! have no representation here and therefore cannot be sent.

use std::sync::Arc;

use crate::matrix::Dense;

use super::agent::AgentState;
use crate::topology::Topology;

/// Which exchange of the iteration a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeRound {
    /// Before the U-update.
    PreUpdate,
    /// After the U-update, feeding the dual step (double schedule only).
    PostUpdate,
}

#[derive(Debug, Clone)]
pub enum Payload {
    /// Immutable copy of the sender's U replica at send time.
    UReplica(Arc<Dense>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PayloadKind {
    UReplica,
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::UReplica(_) => PayloadKind::UReplica,
        }
    }

    pub fn matrix(&self) -> &Dense {
        match self {
            Payload::UReplica(u) => u,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Envelope {
    pub from: usize,
    pub to: usize,
    pub iteration: usize,
    pub round: ExchangeRound,
    pub payload: Payload,
}

/// Sees every envelope as it is delivered.
pub trait BusObserver {
    fn observe(&mut self, envelope: &Envelope);
}

/// Records every delivery; useful for auditing what crosses agent boundaries.
#[derive(Debug, Default)]
pub struct BusRecorder {
    pub envelopes: Vec<Envelope>,
}

impl BusObserver for BusRecorder {
    fn observe(&mut self, envelope: &Envelope) {
        self.envelopes.push(envelope.clone());
    }
}

/// Per-receiver inbox, each sorted by sender id. Read-only once built.
#[derive(Debug, Clone)]
pub struct SnapshotTable {
    inboxes: Vec<Vec<Envelope>>,
}

impl SnapshotTable {
    pub fn inbox(&self, agent: usize) -> &[Envelope] {
        &self.inboxes[agent]
    }

    pub fn agents(&self) -> usize {
        self.inboxes.len()
    }

    /// Σ_{j∈Nᵢ} Uⱼ in ascending sender order.
    pub fn neighbor_sum(&self, agent: usize, rows: usize, cols: usize) -> Dense {
        let mut sum = Dense::zeros(rows, cols);
        for env in &self.inboxes[agent] {
            sum.add_scaled(env.payload.matrix(), 1.0);
        }
        sum
    }
}

/// Snapshots every agent's U and delivers a copy to each neighbor. Must be
/// called at a barrier, when no agent is mid-step.
pub fn exchange(
    agents: &[AgentState],
    topology: &Topology,
    iteration: usize,
    round: ExchangeRound,
    mut observer: Option<&mut (dyn BusObserver + '_)>,
) -> SnapshotTable {
    let snapshots: Vec<Arc<Dense>> = agents.iter().map(|a| Arc::new(a.u().clone())).collect();
    let inboxes = (0..agents.len())
        .map(|to| {
            topology
                .neighbors(to)
                .iter()
                .map(|&from| {
                    let env = Envelope {
                        from,
                        to,
                        iteration,
                        round,
                        payload: Payload::UReplica(Arc::clone(&snapshots[from])),
                    };
                    if let Some(obs) = observer.as_deref_mut() {
                        obs.observe(&env);
                    }
                    env
                })
                .collect()
        })
        .collect();
    SnapshotTable { inboxes }
}
