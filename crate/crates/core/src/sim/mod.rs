//! Deterministic discrete-event simulation of the node.
//!
//! One simulation instance owns all of its state and is single-threaded;
//! independent instances can run concurrently for sweeps. Identical
//! (config, workload, seed) triples produce identical outputs, including the
//! serialized event trace.

mod engine;
mod trace;

pub use trace::{EventTrace, GpuSnap, TraceEvent, TracePayload};

use crate::control::{Controller, ControllerConfig};
use crate::perf::PerfModel;
use crate::workload::RequestSpec;
use crate::{Micros, Watts};
use serde::{Deserialize, Serialize};
use std::io::Write;
use thiserror::Error;

/// Role a GPU serves. `Mixed` only occurs in coalesced mode, where every
/// worker interleaves chunked prefill with decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Prefill,
    Decode,
    Mixed,
}

impl Role {
    pub fn letter(self) -> char {
        match self {
            Role::Prefill => 'P',
            Role::Decode => 'D',
            Role::Mixed => 'M',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SimMode {
    Disaggregated,
    Coalesced,
}

impl std::fmt::Display for SimMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SimMode::Disaggregated => write!(f, "disaggregated"),
            SimMode::Coalesced => write!(f, "coalesced"),
        }
    }
}

/// Initial role and cap of one GPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GpuInit {
    pub role: Role,
    pub cap_w: Watts,
}

/// Node and engine configuration for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub gpus: Vec<GpuInit>,
    pub node_power_budget_w: u32,
    pub mode: SimMode,
    /// Requests per prefill batch, at most.
    pub max_prefill_batch: usize,
    /// Prompt tokens per prefill batch, at most (the head request always fits).
    pub prefill_token_budget: u32,
    /// Sequences per decode batch, at most.
    pub max_decode_batch: usize,
    /// Prefill chunk size in coalesced mode.
    pub chunk_size: u32,
    /// KV handoff buffer capacity in requests.
    pub transfer_buffer_slots: usize,
    /// Delay from commanding a lower cap until the device reliably runs under it.
    pub settle_latency_s: f64,
    /// Delay a drained worker pays before serving its new role.
    pub reassign_latency_s: f64,
    /// Time-series sampling period.
    pub sample_period_s: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            gpus: default_gpus(4, 4, 600, 600),
            node_power_budget_w: 4800,
            mode: SimMode::Disaggregated,
            max_prefill_batch: 4,
            prefill_token_budget: 16_384,
            max_decode_batch: 64,
            chunk_size: 512,
            transfer_buffer_slots: 32,
            settle_latency_s: 0.3,
            reassign_latency_s: 3.0,
            sample_period_s: 1.0,
            seed: 0,
        }
    }
}

/// A node of `prefill` + `decode` GPUs with per-pool caps.
pub fn default_gpus(prefill: usize, decode: usize, p_cap: Watts, d_cap: Watts) -> Vec<GpuInit> {
    let mut gpus = Vec::with_capacity(prefill + decode);
    for _ in 0..prefill {
        gpus.push(GpuInit {
            role: Role::Prefill,
            cap_w: p_cap,
        });
    }
    for _ in 0..decode {
        gpus.push(GpuInit {
            role: Role::Decode,
            cap_w: d_cap,
        });
    }
    gpus
}

/// A coalesced node: every GPU serves both phases at one cap.
pub fn coalesced_gpus(count: usize, cap_w: Watts) -> Vec<GpuInit> {
    vec![
        GpuInit {
            role: Role::Mixed,
            cap_w,
        };
        count
    ]
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("workload must be sorted by arrival time (request {0})")]
    UnsortedWorkload(u64),
    #[error("workload entry {index}: {reason}")]
    BadRequest { index: usize, reason: String },
    #[error("perf model: {0}")]
    Perf(#[from] crate::perf::PerfError),
}

impl SimConfig {
    pub fn validate(
        &self,
        perf: &PerfModel,
        controller: &ControllerConfig,
    ) -> Result<(), SimError> {
        let fail = |msg: String| Err(SimError::Config(msg));
        if self.gpus.is_empty() {
            return fail("need at least one GPU".into());
        }
        let total: u32 = self.gpus.iter().map(|g| g.cap_w).sum();
        if total > self.node_power_budget_w {
            return fail(format!(
                "sum of initial caps {total} W exceeds the node power budget {} W",
                self.node_power_budget_w
            ));
        }
        for (i, gpu) in self.gpus.iter().enumerate() {
            if gpu.cap_w < perf.min_power() || gpu.cap_w > perf.max_power() {
                return fail(format!(
                    "gpu {i} cap {} W outside calibrated range [{}, {}] W",
                    gpu.cap_w,
                    perf.min_power(),
                    perf.max_power()
                ));
            }
        }
        match self.mode {
            SimMode::Disaggregated => {
                let prefill = self.gpus.iter().filter(|g| g.role == Role::Prefill).count();
                let decode = self.gpus.iter().filter(|g| g.role == Role::Decode).count();
                let mixed = self.gpus.iter().filter(|g| g.role == Role::Mixed).count();
                if mixed > 0 {
                    return fail("disaggregated mode admits no mixed-role GPUs".into());
                }
                if prefill == 0 || decode == 0 {
                    return fail(
                        "disaggregated mode needs at least one prefill and one decode GPU".into(),
                    );
                }
            }
            SimMode::Coalesced => {
                if self.gpus.iter().any(|g| g.role != Role::Mixed) {
                    return fail("coalesced mode requires every GPU to be mixed-role".into());
                }
                if controller.policy != crate::control::Policy::Static {
                    return fail("coalesced mode supports only the static policy".into());
                }
                if self.chunk_size == 0 {
                    return fail("chunk_size must be positive".into());
                }
            }
        }
        if self.max_prefill_batch == 0 || self.max_decode_batch == 0 {
            return fail("batch limits must be positive".into());
        }
        if self.prefill_token_budget == 0 {
            return fail("prefill_token_budget must be positive".into());
        }
        if self.transfer_buffer_slots == 0 {
            return fail("transfer buffer needs at least one slot".into());
        }
        if self.settle_latency_s < 0.0 || self.sample_period_s <= 0.0 {
            return fail("latencies must be non-negative and the sample period positive".into());
        }
        if !(2.0..=5.0).contains(&self.reassign_latency_s) {
            return fail(format!(
                "reassign latency {} s outside the supported 2-5 s range",
                self.reassign_latency_s
            ));
        }
        if controller.min_p_w < perf.min_power() || controller.max_p_w > perf.max_power() {
            return fail("controller power range exceeds the calibrated range".into());
        }
        controller.validate().map_err(SimError::Config)?;
        Ok(())
    }
}

/// Raw lifecycle timestamps of one completed request. In coalesced mode the
/// transfer fields collapse onto `prefill_end_us` (no handoff happens).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletedRequest {
    pub id: u64,
    pub arrival_us: Micros,
    pub input_tokens: u32,
    pub output_tokens: u32,
    pub prefill_start_us: Micros,
    pub prefill_end_us: Micros,
    pub transfer_start_us: Micros,
    pub transfer_end_us: Micros,
    pub decode_join_us: Micros,
    pub completion_us: Micros,
}

/// One sampled time-series row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub t_us: Micros,
    /// Per GPU: (role, effective cap, queued prefill requests, active batch).
    pub gpus: Vec<(Role, Watts, usize, usize)>,
    /// Prefill batch completions per second over the last sample period.
    pub rate_p: f64,
    /// Request completions per second over the last sample period.
    pub rate_d: f64,
}

/// Sampled per-GPU state over the run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TimeSeries {
    pub rows: Vec<SampleRow>,
}

impl TimeSeries {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let gpus = self.rows.first().map_or(0, |r| r.gpus.len());
        let mut header = String::from("t_s");
        for g in 0..gpus {
            header.push_str(&format!(",role_{g},cap_w_{g},queue_{g},batch_{g}"));
        }
        header.push_str(",rate_p,rate_d");
        writeln!(w, "{header}")?;
        for row in &self.rows {
            let mut line = format!("{:.3}", crate::us_to_secs(row.t_us));
            for &(role, cap, queue, batch) in &row.gpus {
                line.push_str(&format!(",{},{},{},{}", role.letter(), cap, queue, batch));
            }
            line.push_str(&format!(",{:.3},{:.3}", row.rate_p, row.rate_d));
            writeln!(w, "{line}")?;
        }
        Ok(())
    }
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    /// One entry per workload request, ordered by id.
    pub completed: Vec<CompletedRequest>,
    pub trace: EventTrace,
    pub timeseries: TimeSeries,
    /// Time-weighted mean of the summed effective caps.
    pub avg_provisioned_power_w: f64,
    pub end_us: Micros,
}

/// Run one simulation to completion.
pub fn run_simulation(
    config: &SimConfig,
    perf: &PerfModel,
    workload: &[RequestSpec],
    controller: &ControllerConfig,
) -> Result<SimOutput, SimError> {
    config.validate(perf, controller)?;
    for (index, r) in workload.iter().enumerate() {
        let bad = |reason: String| Err(SimError::BadRequest { index, reason });
        if r.id != index as u64 {
            return bad(format!("ids must be dense from 0, got {}", r.id));
        }
        if r.input_tokens == 0 || r.output_tokens == 0 {
            return bad("token counts must be at least 1".into());
        }
        if !r.arrival_time.is_finite() || r.arrival_time < 0.0 {
            return bad(format!(
                "arrival time {} is not a valid instant",
                r.arrival_time
            ));
        }
    }
    for pair in workload.windows(2) {
        if pair[1].arrival_time < pair[0].arrival_time {
            return Err(SimError::UnsortedWorkload(pair[1].id));
        }
    }
    let engine = engine::Engine::new(config, perf, workload, Controller::new(controller.clone()));
    Ok(engine.run())
}
