//! Inference latency harness.
//!
//! Every model is timed under the same protocol: a fixed number of
//! warmup calls, then `reps` individually timed calls on the same query
//! batch with a monotonic clock. Each call's output is checksummed and
//! the checksum is validated, so no forward can be elided.

use std::time::Instant;

use crate::distill::route_mixed_inference;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::nn::tensor::{SparseRows, Tensor};
use crate::student::{MlpStudent, SaMlpParams, StructureSource};
use crate::teacher::SageParams;

pub const DEFAULT_WARMUP: usize = 5;
pub const DEFAULT_REPS: usize = 30;

#[derive(Clone, Debug)]
pub struct LatencyReport {
    pub model: String,
    pub batch: usize,
    pub reps: usize,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub nodes_per_sec: f64,
}

impl LatencyReport {
    pub fn csv_header() -> &'static str {
        "model,batch,reps,median_ms,p95_ms,nodes_per_sec"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.1}",
            self.model, self.batch, self.reps, self.median_ms, self.p95_ms, self.nodes_per_sec
        )
    }
}

/// Times `call` after warmup; the closure returns a checksum that must
/// stay finite.
fn time_calls(
    model: &str,
    batch: usize,
    reps: usize,
    warmup: usize,
    mut call: impl FnMut() -> Result<f64>,
) -> Result<LatencyReport> {
    if reps == 0 {
        return Err(Error::Config("latency reps must be positive".into()));
    }
    let mut checksum = 0.0;
    for _ in 0..warmup {
        checksum += std::hint::black_box(call()?);
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let v = call()?;
        let elapsed = start.elapsed();
        checksum += std::hint::black_box(v);
        times.push(elapsed.as_secs_f64() * 1e3);
    }
    if !checksum.is_finite() {
        return Err(Error::Numeric(format!("{model}: non-finite outputs during benchmark")));
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_ms = times[reps / 2];
    let p95_ms = times[((reps as f64 * 0.95).ceil() as usize).min(reps) - 1];
    Ok(LatencyReport {
        model: model.into(),
        batch,
        reps,
        median_ms,
        p95_ms,
        nodes_per_sec: batch as f64 / (median_ms / 1e3),
    })
}

fn checksum_of(t: &Tensor) -> f64 {
    t.data().iter().sum()
}

/// Teacher inductive inference: recursive K-hop gather per call.
pub fn bench_teacher(
    params: &SageParams,
    eval_graph: &Graph,
    queries: &[usize],
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    time_calls("sage", queries.len(), reps, warmup, || {
        let probs = params.infer_inductive(eval_graph, queries)?;
        Ok(checksum_of(&probs))
    })
}

/// Student with explicit structure rows: one sparse gather plus MLPs.
pub fn bench_student_explicit(
    params: &SaMlpParams,
    model: &str,
    x: &Tensor,
    rows: &SparseRows,
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    time_calls(model, x.rows(), reps, warmup, || {
        let (_, probs) = params.forward_value(x, StructureSource::ExplicitRows(rows))?;
        Ok(checksum_of(&probs))
    })
}

/// Student through the stage-two latent path: pure feed-forward.
pub fn bench_student_latent(
    params: &SaMlpParams,
    model: &str,
    x: &Tensor,
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    time_calls(model, x.rows(), reps, warmup, || {
        let (_, probs) = params.forward_value(x, StructureSource::LatentFromFeatures)?;
        Ok(checksum_of(&probs))
    })
}

/// Student routed per node by row emptiness.
pub fn bench_student_routed(
    params: &SaMlpParams,
    model: &str,
    x: &Tensor,
    rows: &SparseRows,
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    time_calls(model, x.rows(), reps, warmup, || {
        let probs = route_mixed_inference(params, x, rows)?;
        Ok(checksum_of(&probs))
    })
}

/// Feature-only MLP baseline.
pub fn bench_mlp(
    params: &MlpStudent,
    x: &Tensor,
    reps: usize,
    warmup: usize,
) -> Result<LatencyReport> {
    time_calls("mlp", x.rows(), reps, warmup, || {
        let probs = params.forward_probs(x)?;
        Ok(checksum_of(&probs))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn median_and_p95_are_ordered() {
        let mut rng = Rng::new(1);
        let params = MlpStudent::new(4, 8, 3, 0.0, &mut rng);
        let x = Tensor::uniform_init(10, 4, 1, &mut rng);
        let report = bench_mlp(&params, &x, 15, 2).unwrap();
        assert!(report.p95_ms >= report.median_ms);
        assert!(report.median_ms > 0.0);
        assert!(report.nodes_per_sec > 0.0);
        assert_eq!(report.batch, 10);
    }

    #[test]
    fn zero_reps_rejected() {
        let mut rng = Rng::new(2);
        let params = MlpStudent::new(4, 8, 3, 0.0, &mut rng);
        let x = Tensor::uniform_init(2, 4, 1, &mut rng);
        assert!(bench_mlp(&params, &x, 0, 0).is_err());
    }
}
