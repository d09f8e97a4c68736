//! Performance model: maps GPU power caps and batch/token parameters to
//! prefill latency, decode step latency, and KV-transfer latency.
//!
//! The model is a calibrated surrogate. Each phase carries a piecewise-linear
//! speedup curve over power anchors, normalized to 1.0 at the lowest anchor,
//! and a small set of latency parameters turn token counts into seconds.
//! Calibration is loaded from a JSON file; every key is optional and falls
//! back to the built-in defaults.

use crate::scalar::Scalar;
use crate::Watts;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Lowest cap the device accepts.
pub const DEFAULT_MIN_POWER: Watts = 400;
/// Device total board power.
pub const DEFAULT_MAX_POWER: Watts = 750;
/// Hard device ceiling; calibrations may not exceed it.
pub const DEVICE_TBP: Watts = 750;

/// Inference phase a GPU pool serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Prefill,
    Decode,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Prefill => write!(f, "prefill"),
            Phase::Decode => write!(f, "decode"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PerfError {
    #[error("power {power} W outside calibrated range [{min}, {max}] W")]
    PowerOutOfRange {
        power: Watts,
        min: Watts,
        max: Watts,
    },
    #[error("{what} must be at least 1, got {got}")]
    EmptyDomain { what: &'static str, got: u64 },
}

#[derive(Debug, Error)]
pub enum CalibrationError {
    #[error("{phase}_anchors: need at least one (power, speedup) anchor")]
    NoAnchors { phase: Phase },
    #[error("{phase}_anchors: powers must be strictly increasing (anchor {index})")]
    UnsortedAnchors { phase: Phase, index: usize },
    #[error("{phase}_anchors: speedups must be non-decreasing in power (anchor {index})")]
    NonMonotoneSpeedup { phase: Phase, index: usize },
    #[error("{phase}_anchors: anchor power {power} W outside [{min}, {max}] W")]
    AnchorOutOfRange {
        phase: Phase,
        power: Watts,
        min: Watts,
        max: Watts,
    },
    #[error("{phase}_anchors: speedup at the lowest anchor must equal 1.0, got {got}")]
    BaseSpeedup { phase: Phase, got: f64 },
    #[error("latency_params.{field} must be strictly positive")]
    NonPositiveParam { field: &'static str },
    #[error("min_power {min} W must be below max_power {max} W and max_power at most {tbp} W")]
    PowerRange { min: Watts, max: Watts, tbp: Watts },
    #[error("reading calibration file: {0}")]
    Io(#[from] std::io::Error),
    #[error("parsing calibration file: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Piecewise-linear speedup curve over power anchors for one phase.
///
/// Exact at anchors, linear between them, flat beyond the terminal anchors
/// (no extrapolation). Speedup is relative to the lowest anchor, which is
/// pinned at 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerCurve<F = f64> {
    anchors: Vec<(Watts, F)>,
}

impl<F: Scalar> PowerCurve<F> {
    pub fn new(
        phase: Phase,
        anchors: Vec<(Watts, F)>,
        min_power: Watts,
        max_power: Watts,
    ) -> Result<Self, CalibrationError> {
        if anchors.is_empty() {
            return Err(CalibrationError::NoAnchors { phase });
        }
        for (i, window) in anchors.windows(2).enumerate() {
            if window[1].0 <= window[0].0 {
                return Err(CalibrationError::UnsortedAnchors {
                    phase,
                    index: i + 1,
                });
            }
            if window[1].1 < window[0].1 {
                return Err(CalibrationError::NonMonotoneSpeedup {
                    phase,
                    index: i + 1,
                });
            }
        }
        for &(power, _) in &anchors {
            if power < min_power || power > max_power {
                return Err(CalibrationError::AnchorOutOfRange {
                    phase,
                    power,
                    min: min_power,
                    max: max_power,
                });
            }
        }
        let base = anchors[0].1;
        if (base - F::one()).abs() > F::from_f64_lossy(1e-9) {
            return Err(CalibrationError::BaseSpeedup {
                phase,
                got: base.to_f64().unwrap_or(f64::NAN),
            });
        }
        Ok(Self { anchors })
    }

    /// Default prefill curve: steady gains up to 700 W, flattening after.
    pub fn default_prefill() -> Self {
        let a = |p: Watts, s: f64| (p, F::from_f64_lossy(s));
        Self {
            anchors: vec![a(400, 1.0), a(700, 1.72), a(750, 1.8)],
        }
    }

    /// Default decode curve: improves to 600 W, then plateaus.
    pub fn default_decode() -> Self {
        let a = |p: Watts, s: f64| (p, F::from_f64_lossy(s));
        Self {
            anchors: vec![a(400, 1.0), a(600, 1.4), a(750, 1.45)],
        }
    }

    pub fn anchors(&self) -> &[(Watts, F)] {
        &self.anchors
    }

    /// Interpolated speedup at `power`. Callers guarantee range checks.
    fn speedup(&self, power: Watts) -> F {
        let first = self.anchors[0];
        let last = self.anchors[self.anchors.len() - 1];
        if power <= first.0 {
            return first.1;
        }
        if power >= last.0 {
            return last.1;
        }
        for window in self.anchors.windows(2) {
            let (p0, s0) = window[0];
            let (p1, s1) = window[1];
            if power <= p1 {
                let span = F::from_u64_lossy(u64::from(p1 - p0));
                let off = F::from_u64_lossy(u64::from(power - p0));
                return s0 + (s1 - s0) * off / span;
            }
        }
        last.1
    }
}

/// Constants of the latency surrogate. All strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct LatencyParams<F = f64> {
    /// Prefill token rate at the lowest anchor power, batch size 1 (tokens/s).
    pub prefill_base_rate: F,
    /// Extra throughput factor per added prefill batch slot.
    pub prefill_batch_efficiency: F,
    /// Fixed decode step cost at the lowest anchor power (seconds).
    pub decode_step_fixed: F,
    /// Decode step cost per active sequence (seconds).
    pub decode_step_per_seq: F,
    /// KV-cache footprint per prompt token (bytes).
    pub kv_bytes_per_token: F,
    /// Inter-GPU fabric bandwidth (bytes/s).
    pub fabric_bandwidth: F,
    /// Per-transfer fixed overhead (seconds).
    pub transfer_fixed_overhead: F,
}

impl<F: Scalar> Default for LatencyParams<F> {
    fn default() -> Self {
        let c = F::from_f64_lossy;
        Self {
            prefill_base_rate: c(13_000.0),
            prefill_batch_efficiency: c(0.15),
            decode_step_fixed: c(0.008),
            decode_step_per_seq: c(0.00025),
            kv_bytes_per_token: c(131_072.0),
            fabric_bandwidth: c(48e9),
            transfer_fixed_overhead: c(0.0005),
        }
    }
}

impl<F: Scalar> LatencyParams<F> {
    fn validate(&self) -> Result<(), CalibrationError> {
        let fields: [(&'static str, F); 7] = [
            ("prefill_base_rate", self.prefill_base_rate),
            ("prefill_batch_efficiency", self.prefill_batch_efficiency),
            ("decode_step_fixed", self.decode_step_fixed),
            ("decode_step_per_seq", self.decode_step_per_seq),
            ("kv_bytes_per_token", self.kv_bytes_per_token),
            ("fabric_bandwidth", self.fabric_bandwidth),
            ("transfer_fixed_overhead", self.transfer_fixed_overhead),
        ];
        for (field, value) in fields {
            if value <= F::zero() {
                return Err(CalibrationError::NonPositiveParam { field });
            }
        }
        Ok(())
    }
}

/// Validated performance model for one calibration.
///
/// Pure functions over immutable data; share freely across runs.
#[derive(Debug, Clone)]
pub struct PerfModel<F = f64> {
    min_power: Watts,
    max_power: Watts,
    prefill: PowerCurve<F>,
    decode: PowerCurve<F>,
    params: LatencyParams<F>,
}

impl<F: Scalar> Default for PerfModel<F> {
    fn default() -> Self {
        Self {
            min_power: DEFAULT_MIN_POWER,
            max_power: DEFAULT_MAX_POWER,
            prefill: PowerCurve::default_prefill(),
            decode: PowerCurve::default_decode(),
            params: LatencyParams::default(),
        }
    }
}

impl<F: Scalar> PerfModel<F> {
    pub fn new(
        min_power: Watts,
        max_power: Watts,
        prefill: PowerCurve<F>,
        decode: PowerCurve<F>,
        params: LatencyParams<F>,
    ) -> Result<Self, CalibrationError> {
        if min_power >= max_power || max_power > DEVICE_TBP {
            return Err(CalibrationError::PowerRange {
                min: min_power,
                max: max_power,
                tbp: DEVICE_TBP,
            });
        }
        params.validate()?;
        Ok(Self {
            min_power,
            max_power,
            prefill,
            decode,
            params,
        })
    }

    pub fn min_power(&self) -> Watts {
        self.min_power
    }

    pub fn max_power(&self) -> Watts {
        self.max_power
    }

    pub fn params(&self) -> &LatencyParams<F> {
        &self.params
    }

    fn check_power(&self, power: Watts) -> Result<(), PerfError> {
        if power < self.min_power || power > self.max_power {
            return Err(PerfError::PowerOutOfRange {
                power,
                min: self.min_power,
                max: self.max_power,
            });
        }
        Ok(())
    }

    /// Speedup of `phase` at `power`, relative to the lowest anchor.
    pub fn speedup(&self, phase: Phase, power: Watts) -> Result<F, PerfError> {
        self.check_power(power)?;
        let curve = match phase {
            Phase::Prefill => &self.prefill,
            Phase::Decode => &self.decode,
        };
        Ok(curve.speedup(power))
    }

    /// Wall time to prefill a whole batch of `batch_tokens` prompt tokens
    /// across `batch_size` requests at `power`.
    pub fn prefill_latency(
        &self,
        batch_tokens: u64,
        batch_size: usize,
        power: Watts,
    ) -> Result<F, PerfError> {
        if batch_tokens == 0 {
            return Err(PerfError::EmptyDomain {
                what: "batch_tokens",
                got: 0,
            });
        }
        if batch_size == 0 {
            return Err(PerfError::EmptyDomain {
                what: "batch_size",
                got: 0,
            });
        }
        let speedup = self.speedup(Phase::Prefill, power)?;
        let eff =
            F::one() + self.params.prefill_batch_efficiency * F::from_usize_lossy(batch_size - 1);
        let rate = self.params.prefill_base_rate * eff;
        Ok(F::from_u64_lossy(batch_tokens) / rate / speedup)
    }

    /// Wall time of one decode step with `active_sequences` in the batch.
    /// Each step emits one token for every active sequence.
    pub fn decode_step_latency(
        &self,
        active_sequences: usize,
        power: Watts,
    ) -> Result<F, PerfError> {
        if active_sequences == 0 {
            return Err(PerfError::EmptyDomain {
                what: "active_sequences",
                got: 0,
            });
        }
        let speedup = self.speedup(Phase::Decode, power)?;
        let step = self.params.decode_step_fixed
            + self.params.decode_step_per_seq * F::from_usize_lossy(active_sequences);
        Ok(step / speedup)
    }

    /// Wall time to bulk-transfer the KV cache of `input_tokens` over the fabric.
    pub fn kv_transfer_latency(&self, input_tokens: u64) -> Result<F, PerfError> {
        if input_tokens == 0 {
            return Err(PerfError::EmptyDomain {
                what: "input_tokens",
                got: 0,
            });
        }
        let bytes = F::from_u64_lossy(input_tokens) * self.params.kv_bytes_per_token;
        Ok(self.params.transfer_fixed_overhead + bytes / self.params.fabric_bandwidth)
    }
}

/// On-disk calibration schema. Every key optional; absent keys use defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CalibrationFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_power: Option<Watts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_power: Option<Watts>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_anchors: Option<Vec<(Watts, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_anchors: Option<Vec<(Watts, f64)>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_params: Option<LatencyParamsFile>,
}

/// Latency-parameter overrides within a calibration file.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LatencyParamsFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_base_rate: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefill_batch_efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_step_fixed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decode_step_per_seq: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kv_bytes_per_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fabric_bandwidth: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transfer_fixed_overhead: Option<f64>,
}

impl CalibrationFile {
    /// Parse a calibration file. An empty (or whitespace-only) file means
    /// "all defaults".
    pub fn load(path: impl AsRef<Path>) -> Result<Self, CalibrationError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self, CalibrationError> {
        if text.trim().is_empty() {
            return Ok(Self::default());
        }
        Ok(serde_json::from_str(text)?)
    }

    /// Resolve into a validated model, substituting defaults for absent keys.
    pub fn build<F: Scalar>(&self) -> Result<PerfModel<F>, CalibrationError> {
        let min_power = self.min_power.unwrap_or(DEFAULT_MIN_POWER);
        let max_power = self.max_power.unwrap_or(DEFAULT_MAX_POWER);
        if min_power >= max_power || max_power > DEVICE_TBP {
            return Err(CalibrationError::PowerRange {
                min: min_power,
                max: max_power,
                tbp: DEVICE_TBP,
            });
        }
        let convert = |anchors: &Vec<(Watts, f64)>| {
            anchors
                .iter()
                .map(|&(p, s)| (p, F::from_f64_lossy(s)))
                .collect::<Vec<_>>()
        };
        let prefill = match &self.prefill_anchors {
            Some(anchors) => {
                PowerCurve::new(Phase::Prefill, convert(anchors), min_power, max_power)?
            }
            None => PowerCurve::default_prefill(),
        };
        let decode = match &self.decode_anchors {
            Some(anchors) => {
                PowerCurve::new(Phase::Decode, convert(anchors), min_power, max_power)?
            }
            None => PowerCurve::default_decode(),
        };
        let defaults = LatencyParams::<F>::default();
        let params = match &self.latency_params {
            Some(file) => {
                let pick =
                    |opt: Option<f64>, default: F| opt.map(F::from_f64_lossy).unwrap_or(default);
                LatencyParams {
                    prefill_base_rate: pick(file.prefill_base_rate, defaults.prefill_base_rate),
                    prefill_batch_efficiency: pick(
                        file.prefill_batch_efficiency,
                        defaults.prefill_batch_efficiency,
                    ),
                    decode_step_fixed: pick(file.decode_step_fixed, defaults.decode_step_fixed),
                    decode_step_per_seq: pick(
                        file.decode_step_per_seq,
                        defaults.decode_step_per_seq,
                    ),
                    kv_bytes_per_token: pick(file.kv_bytes_per_token, defaults.kv_bytes_per_token),
                    fabric_bandwidth: pick(file.fabric_bandwidth, defaults.fabric_bandwidth),
                    transfer_fixed_overhead: pick(
                        file.transfer_fixed_overhead,
                        defaults.transfer_fixed_overhead,
                    ),
                }
            }
            None => defaults,
        };
        PerfModel::new(min_power, max_power, prefill, decode, params)
    }
}

/// Load and resolve a calibration file in one step.
pub fn load_calibration<F: Scalar>(
    path: impl AsRef<Path>,
) -> Result<PerfModel<F>, CalibrationError> {
    CalibrationFile::load(path)?.build()
}
