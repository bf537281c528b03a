use std::fmt::Write as _;

/// One row of the per-iteration metric series, shared by the engine and the oracle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationMetrics {
    /// 1-based iteration index.
    pub iteration: usize,
    /// Σᵢ ½‖UᵢVᵢ − Zᵢ‖²_F.
    pub objective: f64,
    pub train_rmse: f64,
    /// `None` when no held-out entries were supplied.
    pub test_rmse: Option<f64>,
    /// Largest ‖Uᵢ − Uⱼ‖_F over edges; 0 without edges.
    pub consensus_gap: f64,
    /// ‖Σᵢ aᵢ‖_F.
    pub dual_sum_norm: f64,
    /// Milliseconds since the run started.
    pub wall_ms: u64,
}

pub trait MetricSink {
    fn record(&mut self, metrics: &IterationMetrics);
}

impl MetricSink for Vec<IterationMetrics> {
    fn record(&mut self, metrics: &IterationMetrics) {
        self.push(*metrics);
    }
}

/// Discards everything.
pub struct NullSink;

impl MetricSink for NullSink {
    fn record(&mut self, _: &IterationMetrics) {}
}

pub const CSV_HEADER: &str =
    "iteration,objective,train_rmse,test_rmse,consensus_gap,dual_sum_norm,wall_ms";

/// Renders the series as `metrics.csv`. With `timing` off the wall-clock
/// column is written as 0 so identical runs produce identical bytes.
pub fn to_csv(rows: &[IterationMetrics], timing: bool) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let test = r.test_rmse.map(|v| format!("{v:?}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{:?},{:?},{},{:?},{:?},{}",
            r.iteration,
            r.objective,
            r.train_rmse,
            test,
            r.consensus_gap,
            r.dual_sum_norm,
            if timing { r.wall_ms } else { 0 }
        );
    }
    out
}
