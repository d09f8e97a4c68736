//! capsim-core: a deterministic discrete-event simulator of a power-capped
//! node serving disaggregated LLM inference.
//!
//! The node runs a fixed set of GPUs split into prefill and decode pools
//! under a shared power budget. A calibrated surrogate maps power caps and
//! batch shapes to latencies, requests flow arrival -> prefill batch ->
//! KV transfer -> decode batch -> completion, and a reactive controller can
//! shift power or whole GPUs between the pools at runtime.
//!
//! ```text
//! workload ──▶ sim engine ──▶ per-request records ──▶ metrics
//!                 │  ▲
//!          snapshot  │ cap / role commands
//!                 ▼  │
//!              controller          perf model (power ▸ latency)
//! ```
//!
//! Modules mirror that split: [`workload`] generates or ingests request
//! streams, [`perf`] owns the calibrated surrogate, [`sim`] runs the event
//! loop, [`control`] decides reallocations, [`metrics`] scores runs, and
//! [`audit`] re-checks invariants from an event trace alone.

pub mod audit;
pub mod control;
pub mod metrics;
pub mod perf;
pub mod scalar;
pub mod sim;
pub mod workload;

/// Power cap in integer watts.
pub type Watts = u32;
/// Simulated time in integer microseconds.
pub type Micros = u64;
/// Seconds as carried in records and file formats.
pub type Seconds = f64;

/// Microseconds from a duration in seconds; positive durations round to at
/// least one microsecond so the event clock always advances.
pub fn duration_us(seconds: f64) -> Micros {
    let us = (seconds * 1e6).round();
    if us < 1.0 {
        1
    } else {
        us as Micros
    }
}

/// Microseconds from an instant in seconds (no minimum).
pub fn instant_us(seconds: f64) -> Micros {
    let us = (seconds * 1e6).round();
    if us <= 0.0 {
        0
    } else {
        us as Micros
    }
}

/// Seconds from integer microseconds.
pub fn us_to_secs(us: Micros) -> Seconds {
    us as f64 / 1e6
}

pub use control::{Action, Controller, ControllerConfig, Direction, Policy, Statistic};
pub use metrics::{RequestRecord, SummaryMetrics};
pub use perf::{load_calibration, CalibrationFile, PerfModel, Phase, PowerCurve};
pub use sim::{run_simulation, GpuInit, Role, SimConfig, SimMode, SimOutput};
pub use workload::{RequestSpec, SloSchedule, WorkloadSpec};

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_conversions() {
        assert_eq!(duration_us(0.3), 300_000);
        assert_eq!(duration_us(1e-9), 1);
        assert_eq!(instant_us(0.0), 0);
        assert_eq!(instant_us(2.5), 2_500_000);
        assert_eq!(us_to_secs(1_500_000), 1.5);
    }
}
