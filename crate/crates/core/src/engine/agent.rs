use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Rating, Shard};
use crate::error::{Error, Result, Site, Step};
use crate::matrix::{masked_assign, solve_spd, Dense, MaskedIndexSet, SpdError};

use super::bus::SnapshotTable;
use super::UpdateMode;

/// One agent's private state. Only `u` is ever shared, and only through the bus.
#[derive(Debug, Clone)]
pub struct AgentState {
    id: usize,
    shard: Shard,
    mask: MaskedIndexSet,
    observed: Vec<f64>,
    u: Dense,
    v: Dense,
    z: Dense,
    dual: Dense,
}

/// m×r matrix with i.i.d. N(0, scale²) entries from stream `stream` of the seeded generator.
pub fn random_factor(m: usize, r: usize, scale: f64, seed: u64, stream: u64) -> Result<Dense> {
    let normal = Normal::new(0.0, scale)
        .map_err(|e| Error::config(format!("invalid init scale {scale}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    Ok(Dense::from_fn(m, r, |_, _| normal.sample(&mut rng)))
}

/// Solves `S X = B`, retrying once with a ridge if `S` is not numerically
/// positive definite. A configured ridge of 0 means `1e-8·trace(S)/dim`.
pub(crate) fn solve_with_retry(s: &Dense, b: &Dense, ridge: f64, site: Site) -> Result<Dense> {
    match solve_spd(s, b, 0.0) {
        Ok(x) => Ok(x),
        Err(SpdError::Dimension(msg)) => Err(Error::Config(msg)),
        Err(first @ SpdError::NotPositiveDefinite { .. }) => {
            let eps = if ridge > 0.0 {
                ridge
            } else {
                1e-8 * s.trace() / s.rows().max(1) as f64
            };
            solve_spd(s, b, eps).map_err(|retry| Error::Singular {
                site,
                detail: format!("{first}; retry with ridge {eps:e}: {retry}"),
            })
        }
    }
}

fn ensure_finite(m: &Dense, site: Site) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { site })
    }
}

impl AgentState {
    /// Fresh state: random U, zero V and dual, Z holding the observed ratings and zeros elsewhere.
    pub fn new(shard: Shard, rank: usize, init_scale: f64, seed: u64) -> Result<Self> {
        let m = shard.local.users();
        let width = shard.width();
        if rank == 0 || rank > m {
            return Err(Error::config(format!(
                "rank must be in 1..={m} (user count), got {rank}"
            )));
        }
        let mask = shard.local.mask();
        let observed = shard.local.values();
        let u = random_factor(m, rank, init_scale, seed, shard.agent as u64)?;
        let z = masked_assign(&Dense::zeros(m, width), &mask, &observed)?;
        Ok(AgentState {
            id: shard.agent,
            mask,
            observed,
            u,
            v: Dense::zeros(rank, width),
            z,
            dual: Dense::zeros(m, rank),
            shard,
        })
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shard(&self) -> &Shard {
        &self.shard
    }

    pub fn mask(&self) -> &MaskedIndexSet {
        &self.mask
    }

    /// Observed ratings aligned with [`Self::mask`].
    pub fn observed(&self) -> &[f64] {
        &self.observed
    }

    pub fn u(&self) -> &Dense {
        &self.u
    }

    pub fn v(&self) -> &Dense {
        &self.v
    }

    pub fn z(&self) -> &Dense {
        &self.z
    }

    pub fn dual(&self) -> &Dense {
        &self.dual
    }

    /// Replaces the factor blocks, e.g. to start from a known point.
    pub fn set_state(&mut self, u: Dense, v: Dense, z: Dense, dual: Dense) -> Result<()> {
        let (m, w, r) = (self.u.rows(), self.z.cols(), self.u.cols());
        let shapes = [
            (u.rows(), u.cols(), m, r, "U"),
            (v.rows(), v.cols(), r, w, "V"),
            (z.rows(), z.cols(), m, w, "Z"),
            (dual.rows(), dual.cols(), m, r, "dual"),
        ];
        for (got_r, got_c, want_r, want_c, name) in shapes {
            if (got_r, got_c) != (want_r, want_c) {
                return Err(Error::config(format!(
                    "{name} must be {want_r}x{want_c}, got {got_r}x{got_c}"
                )));
            }
        }
        self.u = u;
        self.v = v;
        self.z = z;
        self.dual = dual;
        Ok(())
    }

    fn site(&self, step: Step, iteration: usize) -> Site {
        Site {
            agent: Some(self.id),
            step,
            iteration,
        }
    }

    /// `V ← (UᵀU)⁻¹ UᵀZ`.
    pub fn step_v(&mut self, ridge: f64, iteration: usize) -> Result<()> {
        let site = self.site(Step::V, iteration);
        let rhs = self.u.t_matmul(&self.z)?;
        let v = solve_with_retry(&self.u.gram(), &rhs, ridge, site)?;
        ensure_finite(&v, site)?;
        self.v = v;
        Ok(())
    }

    /// `Z ← UV` off the observed set, the observed ratings (copied) on it.
    pub fn step_z(&mut self, iteration: usize) -> Result<()> {
        let z = masked_assign(&self.u.matmul(&self.v)?, &self.mask, &self.observed)?;
        ensure_finite(&z, self.site(Step::Z, iteration))?;
        self.z = z;
        Ok(())
    }

    /// U-update from the pre-update snapshots. Returns the relative change
    /// `‖U_new − U_old‖ / (1 + ‖U_old‖)`.
    pub fn step_u(
        &mut self,
        snapshots: &SnapshotTable,
        beta: f64,
        mode: UpdateMode,
        ridge: f64,
        iteration: usize,
    ) -> Result<f64> {
        let site = self.site(Step::U, iteration);
        let (m, r) = (self.u.rows(), self.u.cols());
        let degree = snapshots.inbox(self.id).len() as f64;
        let neighbor_sum = snapshots.neighbor_sum(self.id, m, r);

        let mut rhs = self.z.matmul_t(&self.v)?;
        rhs.add_scaled(&self.dual, -1.0);
        if mode != UpdateMode::Verbatim {
            rhs.add_scaled(&self.u, beta * degree);
        }
        rhs.add_scaled(&neighbor_sum, beta);

        let new_u = match mode {
            UpdateMode::Verbatim | UpdateMode::Consensus => {
                rhs.scale(1.0 / (1.0 + 2.0 * beta * degree))
            }
            UpdateMode::Exact => {
                let mut system = self.v.matmul_t(&self.v)?;
                let shift = 2.0 * beta * degree;
                for i in 0..r {
                    system.set(i, i, system.get(i, i) + shift);
                }
                solve_with_retry(&system, &rhs.transpose(), ridge, site)?.transpose()
            }
        };
        ensure_finite(&new_u, site)?;
        let change = new_u.sub(&self.u).frob_norm() / (1.0 + self.u.frob_norm());
        self.u = new_u;
        Ok(change)
    }

    /// `a ← a + β(|Nᵢ|·U − Σ_{j∈Nᵢ} Uⱼ)`, with the neighbor sum taken from `snapshots`.
    pub fn step_dual(&mut self, snapshots: &SnapshotTable, beta: f64, iteration: usize) -> Result<()> {
        let (m, r) = (self.u.rows(), self.u.cols());
        let degree = snapshots.inbox(self.id).len() as f64;
        if degree == 0.0 {
            return Ok(());
        }
        let mut residual = self.u.scale(degree);
        residual.add_scaled(&snapshots.neighbor_sum(self.id, m, r), -1.0);
        let mut dual = self.dual.clone();
        dual.add_scaled(&residual, beta);
        ensure_finite(&dual, self.site(Step::Dual, iteration))?;
        self.dual = dual;
        Ok(())
    }

    /// Prediction for local column `col` using this agent's own factors.
    pub fn predict(&self, user: usize, col: usize) -> f64 {
        let row = self.u.row(user);
        let mut s = 0.0;
        for (k, &x) in row.iter().enumerate() {
            s += x * self.v.get(k, col);
        }
        s
    }

    /// Sum of squared errors over `entries` (local coordinates).
    pub(crate) fn squared_error(&self, entries: &[Rating]) -> f64 {
        entries
            .iter()
            .map(|e| {
                let d = self.predict(e.user, e.item) - e.value;
                d * d
            })
            .sum()
    }

    pub(crate) fn objective(&self) -> f64 {
        0.5 * self
            .u
            .matmul(&self.v)
            .expect("U and V shapes are fixed at construction")
            .sub(&self.z)
            .squared_norm()
    }
}
