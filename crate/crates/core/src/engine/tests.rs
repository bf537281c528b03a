use super::*;
use crate::data::{partition_columns, synth_low_rank, Rating, RatingMatrix, SynthSpec};
use crate::matrix::Dense;
use crate::metrics::IterationMetrics;
use crate::topology::{erdos_renyi, ring};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn instance(m: usize, n: usize, r: usize, frac: f64, seed: u64) -> RatingMatrix {
    synth_low_rank(&SynthSpec {
        users: m,
        items: n,
        rank: r,
        observe_fraction: frac,
        noise_sd: 0.0,
        seed,
    })
    .unwrap()
    .0
}

fn config(rank: usize) -> EngineConfig {
    EngineConfig {
        rank,
        iterations: 10,
        seed: 42,
        workers: 1,
        ..EngineConfig::default()
    }
}

fn sim(r: &RatingMatrix, agents: usize, cfg: EngineConfig) -> Simulation {
    Simulation::new(partition_columns(r, agents).unwrap(), ring(agents).unwrap(), cfg).unwrap()
}

fn single_agent(u: Dense, z: Dense) -> AgentState {
    let (m, w) = (z.rows(), z.cols());
    let shard = Shard {
        agent: 0,
        start: 0,
        end: w,
        local: RatingMatrix::new(m, w, vec![]).unwrap(),
    };
    let r = u.cols();
    let mut a = AgentState::new(shard, r, 1.0, 0).unwrap();
    a.set_state(u, Dense::zeros(r, w), z, Dense::zeros(m, r)).unwrap();
    a
}

fn rand_dense(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Dense {
    Dense::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

#[test]
fn init_examples() {
    let r = instance(12, 10, 2, 0.5, 1);
    let agents = init_agents(partition_columns(&r, 3).unwrap(), &ring(3).unwrap(), &config(2)).unwrap();
    let mut dual_sum = Dense::zeros(12, 2);
    for a in &agents {
        dual_sum.add_scaled(a.dual(), 1.0);
        let mut expected = Dense::zeros(12, a.shard().width());
        for e in a.shard().local.entries() {
            expected.set(e.user, e.item, e.value);
        }
        assert_eq!(a.z(), &expected);
        assert_eq!(a.u().rows(), 12);
    }
    assert_eq!(dual_sum.frob_norm(), 0.0);

    let again = init_agents(partition_columns(&r, 3).unwrap(), &ring(3).unwrap(), &config(2)).unwrap();
    for (a, b) in agents.iter().zip(&again) {
        assert_eq!(a.u().as_slice(), b.u().as_slice());
    }
    assert_ne!(agents[0].u(), agents[1].u());

    let err = init_agents(partition_columns(&r, 3).unwrap(), &ring(3).unwrap(), &config(13)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
    let err = init_agents(partition_columns(&r, 2).unwrap(), &ring(3).unwrap(), &config(2)).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

#[test]
fn step_v_examples() {
    // Orthonormal columns: V = UᵀZ.
    let s = 1.0 / 2f64.sqrt();
    let u = Dense::from_rows(&[vec![s, 0.0], vec![s, 0.0], vec![0.0, 1.0]]).unwrap();
    let z = Dense::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
    let mut a = single_agent(u.clone(), z.clone());
    a.step_v(0.0, 1).unwrap();
    let expected = u.t_matmul(&z).unwrap();
    for (x, y) in a.v().as_slice().iter().zip(expected.as_slice()) {
        assert!((x - y).abs() < 1e-14);
    }

    // U = I (m = r): V = Z.
    let mut a = single_agent(Dense::identity(3), z.clone());
    a.step_v(0.0, 1).unwrap();
    assert_eq!(a.v(), &z);
}

#[test]
fn step_v_matches_per_column_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let u = rand_dense(&mut rng, 4, 2);
    let z = rand_dense(&mut rng, 4, 3);
    let mut a = single_agent(u.clone(), z.clone());
    a.step_v(0.0, 1).unwrap();
    // Oracle: 2x2 normal equations per column, solved by Cramer's rule.
    let (mut s11, mut s12, mut s22) = (0.0, 0.0, 0.0);
    for k in 0..4 {
        s11 += u.get(k, 0) * u.get(k, 0);
        s12 += u.get(k, 0) * u.get(k, 1);
        s22 += u.get(k, 1) * u.get(k, 1);
    }
    let det = s11 * s22 - s12 * s12;
    for c in 0..3 {
        let (mut b1, mut b2) = (0.0, 0.0);
        for k in 0..4 {
            b1 += u.get(k, 0) * z.get(k, c);
            b2 += u.get(k, 1) * z.get(k, c);
        }
        let x1 = (s22 * b1 - s12 * b2) / det;
        let x2 = (s11 * b2 - s12 * b1) / det;
        assert!((a.v().get(0, c) - x1).abs() < 1e-9);
        assert!((a.v().get(1, c) - x2).abs() < 1e-9);
    }
}

#[test]
fn step_v_falls_back_to_ridge_then_fails() {
    // Rank-deficient U: identical columns.
    let u = Dense::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![0.5, 0.5]]).unwrap();
    let z = Dense::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]).unwrap();
    let mut a = single_agent(u, z.clone());
    a.step_v(0.0, 1).unwrap();
    assert!(a.v().is_finite());

    let mut zero = single_agent(Dense::zeros(3, 2), z);
    match zero.step_v(0.0, 4).unwrap_err() {
        Error::Singular { site, .. } => {
            assert_eq!(site.agent, Some(0));
            assert_eq!(site.step, crate::error::Step::V);
            assert_eq!(site.iteration, 4);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn step_z_examples() {
    let u = Dense::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
    let v = Dense::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let make = |entries: Vec<Rating>| {
        let shard = Shard {
            agent: 0,
            start: 0,
            end: 2,
            local: RatingMatrix::new(2, 2, entries).unwrap(),
        };
        let mut a = AgentState::new(shard, 2, 1.0, 0).unwrap();
        a.set_state(u.clone(), v.clone(), Dense::zeros(2, 2), Dense::zeros(2, 2)).unwrap();
        a.step_z(1).unwrap();
        a.z().clone()
    };
    assert_eq!(make(vec![]), v);
    let full: Vec<Rating> = (0..2)
        .flat_map(|u| (0..2).map(move |i| Rating { user: u, item: i, value: (10 * u + i) as f64 }))
        .collect();
    assert_eq!(make(full), Dense::from_rows(&[vec![0.0, 1.0], vec![10.0, 11.0]]).unwrap());
    let diag = vec![
        Rating { user: 0, item: 0, value: 5.0 },
        Rating { user: 1, item: 1, value: 3.0 },
    ];
    assert_eq!(make(diag), Dense::from_rows(&[vec![5.0, 2.0], vec![3.0, 3.0]]).unwrap());
}

#[test]
fn exchange_examples() {
    let r = instance(6, 8, 2, 0.5, 3);
    let mut s = sim(&r, 4, config(2));
    let table = exchange(s.agents(), s.topology(), 1, ExchangeRound::PreUpdate, None);
    let senders: Vec<usize> = table.inbox(0).iter().map(|e| e.from).collect();
    assert_eq!(senders, vec![1, 3]);

    // Later mutation of the sender does not reach the snapshot.
    let before = s.agents()[1].u().clone();
    s.iterate(1, None).unwrap();
    assert_ne!(s.agents()[1].u(), &before);
    let env = &table.inbox(0)[0];
    assert_eq!(env.payload.matrix(), &before);

    let one = sim(&r, 1, config(2));
    let t1 = exchange(one.agents(), one.topology(), 1, ExchangeRound::PreUpdate, None);
    assert!(t1.inbox(0).is_empty());
}

/// Agent 0 of a 3-ring where every replica sits at `U*` and `ZVᵀ = U*`
/// (`V = I`, `Z = U*`). Returns agent 0's U after one update.
fn consensus_fixture(mode: UpdateMode, beta: f64) -> (Dense, Dense) {
    let ustar = Dense::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
    let shards: Vec<Shard> = (0..3)
        .map(|a| Shard {
            agent: a,
            start: 2 * a,
            end: 2 * a + 2,
            local: RatingMatrix::new(2, 2, vec![]).unwrap(),
        })
        .collect();
    let topo = ring(3).unwrap();
    let mut agents = init_agents(shards, &topo, &config(2)).unwrap();
    for a in agents.iter_mut() {
        a.set_state(ustar.clone(), Dense::identity(2), ustar.clone(), Dense::zeros(2, 2))
            .unwrap();
    }
    let table = exchange(&agents, &topo, 1, ExchangeRound::PreUpdate, None);
    agents[0].step_u(&table, beta, mode, 0.0, 1).unwrap();
    (agents[0].u().clone(), ustar)
}

fn assert_close(a: &Dense, b: &Dense) {
    for (x, y) in a.as_slice().iter().zip(b.as_slice()) {
        assert!((x - y).abs() < 1e-14, "{a:?} vs {b:?}");
    }
}

#[test]
fn step_u_consensus_point() {
    // β = 0.7, |N| = 2: numerator U*(1 + 1.4 + 1.4) = 3.8·U*, denominator 3.8.
    let (got, ustar) = consensus_fixture(UpdateMode::Consensus, 0.7);
    assert_close(&got, &ustar);
    let (got, ustar) = consensus_fixture(UpdateMode::Exact, 0.7);
    assert_close(&got, &ustar);
    // Without the self term the printed update pulls away: U*·2.4/3.8.
    let (got, ustar) = consensus_fixture(UpdateMode::Verbatim, 0.7);
    assert_close(&got, &ustar.scale(2.4 / 3.8));
}

#[test]
fn step_u_with_zero_beta_is_local_fit() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = rand_dense(&mut rng, 3, 2);
    let u = rand_dense(&mut rng, 3, 2);
    for mode in [UpdateMode::Verbatim, UpdateMode::Consensus, UpdateMode::Exact] {
        let mut a = single_agent(u.clone(), z.clone());
        // V = I so VVᵀ = I and the exact mode degenerates as well.
        a.set_state(u.clone(), Dense::identity(2), z.clone(), Dense::zeros(3, 2)).unwrap();
        let topo = ring(1).unwrap();
        let table = exchange(std::slice::from_ref(&a), &topo, 1, ExchangeRound::PreUpdate, None);
        a.step_u(&table, 0.0, mode, 0.0, 1).unwrap();
        let expected = z.matmul_t(&Dense::identity(2)).unwrap();
        for (x, y) in a.u().as_slice().iter().zip(expected.as_slice()) {
            assert!((x - y).abs() < 1e-14, "{mode}");
        }
    }
}

#[test]
fn step_dual_examples() {
    let r = instance(5, 6, 2, 0.6, 4);
    let mut s = sim(&r, 3, config(2));
    let same = Dense::from_rows(&vec![vec![1.0, 2.0]; 5]).unwrap();
    for a in s.agents_mut() {
        let (v, z) = (a.v().clone(), a.z().clone());
        a.set_state(same.clone(), v, z, Dense::zeros(5, 2)).unwrap();
    }
    let table = exchange(s.agents(), s.topology(), 1, ExchangeRound::PostUpdate, None);
    for a in s.agents_mut() {
        a.step_dual(&table, 0.5, 1).unwrap();
        assert_eq!(a.dual(), &Dense::zeros(5, 2));
    }

    let mut lone = sim(&r, 1, config(2));
    let table = exchange(lone.agents(), lone.topology(), 1, ExchangeRound::PostUpdate, None);
    lone.agents_mut()[0].step_dual(&table, 0.5, 1).unwrap();
    assert_eq!(lone.agents()[0].dual(), &Dense::zeros(5, 2));
}

fn dual_sum_bound(agents: &[AgentState]) -> (f64, f64) {
    let mut sum = Dense::zeros(agents[0].dual().rows(), agents[0].dual().cols());
    let mut max = 0.0f64;
    for a in agents {
        sum.add_scaled(a.dual(), 1.0);
        max = max.max(a.dual().frob_norm());
    }
    (sum.frob_norm(), max)
}

#[test]
fn double_schedule_conserves_dual_sum() {
    let r = instance(20, 24, 3, 0.5, 5);
    for topo in [ring(4).unwrap(), erdos_renyi(4, 0.6, 1).unwrap()] {
        let mut s = Simulation::new(partition_columns(&r, 4).unwrap(), topo, config(3)).unwrap();
        for t in 1..=10 {
            s.iterate(t, None).unwrap();
            let (sum, max) = dual_sum_bound(s.agents());
            assert!(max > 0.0);
            assert!(sum <= 1e-8 * max.max(1e-300), "t={t}: {sum} vs {max}");
        }
    }
}

#[test]
fn constraint_and_v_optimality_hold_every_iteration() {
    let r = instance(25, 30, 3, 0.4, 6);
    for mode in [UpdateMode::Verbatim, UpdateMode::Consensus, UpdateMode::Exact] {
        let mut s = sim(&r, 3, EngineConfig { mode, ..config(3) });
        for t in 1..=8 {
            s.iterate(t, None).unwrap();
            for a in s.agents() {
                for (&(u, i), &v) in a.mask().entries().iter().zip(a.observed()) {
                    assert_eq!(a.z().get(u, i).to_bits(), v.to_bits());
                }
            }
        }
    }
}

#[test]
fn run_emits_rows_and_stops_on_tolerance() {
    let r = instance(10, 12, 2, 0.7, 7);
    let mut rows: Vec<IterationMetrics> = Vec::new();
    let mut s = sim(&r, 2, EngineConfig { iterations: 1, ..config(2) });
    s.run(&mut rows, None).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].iteration, 1);

    let mut rows = Vec::new();
    let mut s = sim(&r, 2, EngineConfig { iterations: 400, beta: 20.0, stop_tolerance: Some(1e-4), ..config(2) });
    let outcome = s.run(&mut rows, None).unwrap();
    assert!(outcome.stopped_early, "{outcome:?}");
    assert_eq!(rows.len(), outcome.iterations);
}

#[test]
fn worker_count_does_not_change_results() {
    let r = instance(30, 40, 3, 0.4, 8);
    let run = |workers| {
        let mut rows = Vec::new();
        let mut s = sim(&r, 5, EngineConfig { workers, iterations: 15, ..config(3) });
        s.run(&mut rows, None).unwrap();
        let us: Vec<Vec<u64>> = s.agents().iter().map(|a| a.u().as_slice().iter().map(|v| v.to_bits()).collect()).collect();
        let obj: Vec<u64> = rows.iter().map(|m| m.objective.to_bits()).collect();
        (us, obj)
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn metrics_examples() {
    // Exact factorization with full observation.
    let u = Dense::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
    let v = Dense::from_rows(&[vec![3.0, 4.0]]).unwrap();
    let truth = u.matmul(&v).unwrap();
    let ratings = crate::data::dense_to_ratings(&truth);
    let mut s = sim(&ratings, 1, config(1));
    let a = &mut s.agents_mut()[0];
    a.set_state(u, v, truth, Dense::zeros(2, 1)).unwrap();
    let m = s.metrics(1, 0);
    assert_eq!(m.objective, 0.0);
    assert_eq!(m.train_rmse, 0.0);
    assert_eq!(m.consensus_gap, 0.0);
    assert_eq!(m.test_rmse, None);
}

#[test]
fn objective_matches_entry_loop() {
    let r = instance(9, 11, 2, 0.5, 9);
    let mut s = sim(&r, 3, config(2));
    s.iterate(1, None).unwrap();
    s.iterate(2, None).unwrap();
    let mut oracle = 0.0;
    for a in s.agents() {
        for i in 0..a.z().rows() {
            for j in 0..a.z().cols() {
                let mut p = 0.0;
                for k in 0..a.u().cols() {
                    p += a.u().get(i, k) * a.v().get(k, j);
                }
                oracle += 0.5 * (p - a.z().get(i, j)).powi(2);
            }
        }
    }
    let got = s.metrics(2, 0).objective;
    assert!((got - oracle).abs() <= 1e-10 * oracle, "{got} vs {oracle}");
}

#[test]
fn bus_carries_only_u_replicas() {
    let r = instance(8, 9, 2, 0.5, 10);
    let mut s = sim(&r, 3, config(2));
    let mut rec = BusRecorder::default();
    s.run(&mut crate::metrics::NullSink, Some(&mut rec)).unwrap();
    // 3-ring: 6 deliveries per exchange, 2 exchanges per iteration.
    assert_eq!(rec.envelopes.len(), 10 * 2 * 6);
    assert!(rec.envelopes.iter().all(|e| e.payload.kind() == PayloadKind::UReplica));
    assert!(rec.envelopes.iter().all(|e| {
        let m = e.payload.matrix();
        (m.rows(), m.cols()) == (8, 2) && s.topology().neighbors(e.to).contains(&e.from)
    }));
}

#[test]
fn mode_and_schedule_keywords() {
    for m in [UpdateMode::Verbatim, UpdateMode::Consensus, UpdateMode::Exact] {
        assert_eq!(m.to_string().parse::<UpdateMode>().unwrap(), m);
    }
    assert_eq!("single".parse::<ExchangeSchedule>().unwrap(), ExchangeSchedule::Single);
    assert!("triple".parse::<ExchangeSchedule>().is_err());
}
