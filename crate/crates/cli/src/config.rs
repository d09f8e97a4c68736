//! Experiment configuration: presets, config files, and resolution.
//!
//! A config file is JSON. Every key is optional; resolution order is
//! preset < file < command-line flags, and the fully resolved config is
//! echoed into each run directory so any artifact can be regenerated from
//! the echo alone.

use anyhow::{bail, Context, Result};
use capsim_core::control::{ControllerConfig, Policy};
use capsim_core::perf::{CalibrationFile, PerfModel};
use capsim_core::sim::{coalesced_gpus, default_gpus, SimConfig, SimMode};
use capsim_core::workload::{
    gen_poisson_arrivals, gen_two_phase_synthetic, gen_uniform_lengths, load_trace, PhaseSpec,
    RequestSpec, SloSchedule, WorkloadSpec,
};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Workload selection for a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum WorkloadConfig {
    /// Uniformly drawn prompt/output lengths with Poisson arrivals.
    Uniform {
        qps_per_gpu: f64,
        count: usize,
        input_range: (u32, u32),
        output_range: (u32, u32),
    },
    /// One fixed shape for every request.
    Fixed {
        qps_per_gpu: f64,
        count: usize,
        input_tokens: u32,
        output_tokens: u32,
    },
    /// Prefill-heavy phase, then decode-heavy phase, with a TPOT target that
    /// tightens at the boundary.
    TwoPhase {
        qps_per_gpu: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        phases: Option<Vec<PhaseSpec>>,
        #[serde(default = "default_ttft")]
        ttft_slo_s: f64,
    },
    /// Replay a trace file (CSV or JSONL).
    Trace { path: PathBuf, qps_per_gpu: f64 },
}

fn default_ttft() -> f64 {
    1.0
}

impl Default for WorkloadConfig {
    fn default() -> Self {
        WorkloadConfig::Uniform {
            qps_per_gpu: 1.5,
            count: 2000,
            input_range: (512, 8192),
            output_range: (128, 256),
        }
    }
}

impl WorkloadConfig {
    pub fn qps_per_gpu(&self) -> f64 {
        match self {
            WorkloadConfig::Uniform { qps_per_gpu, .. }
            | WorkloadConfig::Fixed { qps_per_gpu, .. }
            | WorkloadConfig::TwoPhase { qps_per_gpu, .. }
            | WorkloadConfig::Trace { qps_per_gpu, .. } => *qps_per_gpu,
        }
    }

    pub fn set_qps(&mut self, qps: f64) {
        match self {
            WorkloadConfig::Uniform { qps_per_gpu, .. }
            | WorkloadConfig::Fixed { qps_per_gpu, .. }
            | WorkloadConfig::TwoPhase { qps_per_gpu, .. }
            | WorkloadConfig::Trace { qps_per_gpu, .. } => *qps_per_gpu = qps,
        }
    }

    /// Generate the request stream and the workload-implied SLO schedule (if
    /// this workload defines one).
    pub fn build(
        &self,
        gpu_count: usize,
        seed: u64,
    ) -> Result<(Vec<RequestSpec>, Option<SloSchedule>)> {
        match self {
            WorkloadConfig::Uniform {
                qps_per_gpu,
                count,
                input_range,
                output_range,
            } => {
                let spec = WorkloadSpec::new(*qps_per_gpu, gpu_count, seed);
                let lengths = gen_uniform_lengths(*count, *input_range, *output_range, seed);
                Ok((gen_poisson_arrivals(&spec, &lengths)?, None))
            }
            WorkloadConfig::Fixed {
                qps_per_gpu,
                count,
                input_tokens,
                output_tokens,
            } => {
                let spec = WorkloadSpec::new(*qps_per_gpu, gpu_count, seed);
                let lengths = vec![(*input_tokens, *output_tokens); *count];
                Ok((gen_poisson_arrivals(&spec, &lengths)?, None))
            }
            WorkloadConfig::TwoPhase {
                qps_per_gpu,
                phases,
                ttft_slo_s,
            } => {
                let mut spec = WorkloadSpec::two_phase_default(*qps_per_gpu, gpu_count, seed);
                if let Some(phases) = phases {
                    spec.phases = phases.clone();
                }
                let (requests, slo) = gen_two_phase_synthetic(&spec, *ttft_slo_s)?;
                Ok((requests, Some(slo)))
            }
            WorkloadConfig::Trace { path, qps_per_gpu } => {
                let spec = WorkloadSpec::new(*qps_per_gpu, gpu_count, seed);
                let requests = load_trace(path, &spec)?;
                Ok((requests, None))
            }
        }
    }
}

/// Explicit latency targets in a config file: either one constant pair or a
/// full schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SloSection {
    Constant { ttft_s: f64, tpot_s: f64 },
    Schedule(SloSchedule),
}

impl SloSection {
    fn schedule(&self) -> SloSchedule {
        match self {
            SloSection::Constant { ttft_s, tpot_s } => SloSchedule::constant(*ttft_s, *tpot_s),
            SloSection::Schedule(s) => s.clone(),
        }
    }
}

/// On-disk experiment config; every field optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controller: Option<ControllerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workload: Option<WorkloadConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo: Option<SloSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<PathBuf>,
    /// Inline calibration (echoed form; takes precedence over `calibration`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration_inline: Option<CalibrationFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub qps: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub slo_scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

impl ConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Fully resolved experiment. Serializes as the config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub sim: SimConfig,
    pub controller: ControllerConfig,
    pub workload: WorkloadConfig,
    pub calibration_inline: CalibrationFile,
    pub seed: u64,
    pub repeats: usize,
    pub qps: Vec<f64>,
    pub slo_scale: Vec<f64>,
    /// Set during resolution and never serialized; an echo bakes the final
    /// schedule into `controller.slo`, so reloaded echoes read as explicit.
    #[serde(skip_serializing, default = "always_true")]
    pub slo_explicit: bool,
}

fn always_true() -> bool {
    true
}

impl ResolvedConfig {
    pub fn perf(&self) -> Result<PerfModel> {
        Ok(self.calibration_inline.build()?)
    }

    /// Request stream plus effective SLO schedule for one run seed.
    /// An explicit `slo` section always wins; otherwise a workload-derived
    /// schedule (two-phase) applies; otherwise the default targets.
    pub fn build_workload(&self, seed: u64) -> Result<(Vec<RequestSpec>, SloSchedule)> {
        let (requests, derived) = self.workload.build(self.sim.gpus.len(), seed)?;
        let slo = match derived {
            Some(schedule) if !self.slo_explicit => schedule,
            _ => self.controller.slo.clone(),
        };
        Ok((requests, slo))
    }

    pub fn echo_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("config serializes");
        text.push('\n');
        text
    }
}

/// Named study configurations.
pub const PRESETS: &[&str] = &[
    "coalesced-750",
    "4p4d-750",
    "4p4d-600",
    "5p3d-600",
    "4p750-4d450",
    "4p675-4d525",
    "dynpower",
    "dyngpu",
    "dynboth",
];

pub fn preset(name: &str) -> Result<(SimConfig, ControllerConfig)> {
    let mut sim = SimConfig::default();
    let mut controller = ControllerConfig::default();
    match name.to_ascii_lowercase().as_str() {
        "coalesced-750" => {
            sim.mode = SimMode::Coalesced;
            sim.gpus = coalesced_gpus(8, 750);
            sim.node_power_budget_w = 6000;
        }
        "4p4d-750" => {
            sim.gpus = default_gpus(4, 4, 750, 750);
            sim.node_power_budget_w = 6000;
        }
        "4p4d-600" => sim.gpus = default_gpus(4, 4, 600, 600),
        "5p3d-600" => sim.gpus = default_gpus(5, 3, 600, 600),
        "4p750-4d450" => sim.gpus = default_gpus(4, 4, 750, 450),
        "4p675-4d525" => sim.gpus = default_gpus(4, 4, 675, 525),
        "dynpower" => controller.policy = Policy::DynPower,
        "dyngpu" => controller.policy = Policy::DynGpu,
        "dynboth" => controller.policy = Policy::DynBoth,
        other => bail!("unknown preset '{other}'; known: {}", PRESETS.join(", ")),
    }
    Ok((sim, controller))
}

/// Flag-level overrides applied on top of preset and file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub qps: Option<Vec<f64>>,
    pub slo_scale: Option<Vec<f64>>,
    pub repeats: Option<usize>,
    pub seed: Option<u64>,
    pub trace: Option<PathBuf>,
}

pub fn resolve(file: Option<&ConfigFile>, overrides: &Overrides) -> Result<ResolvedConfig> {
    let preset_name = overrides
        .preset
        .clone()
        .or_else(|| file.and_then(|f| f.preset.clone()));
    let (mut sim, mut controller) = match &preset_name {
        Some(name) => preset(name)?,
        None => (SimConfig::default(), ControllerConfig::default()),
    };
    let mut workload = WorkloadConfig::default();
    let mut calibration = CalibrationFile::default();
    let mut seed = 0u64;
    let mut repeats = 1usize;
    let mut qps: Vec<f64> = Vec::new();
    let mut slo_scale: Vec<f64> = vec![1.0];
    let mut slo_explicit = false;

    if let Some(file) = file {
        if let Some(s) = &file.sim {
            sim = s.clone();
        }
        if let Some(c) = &file.controller {
            controller = c.clone();
            slo_explicit = true;
        }
        if let Some(w) = &file.workload {
            workload = w.clone();
        }
        if let Some(slo) = &file.slo {
            controller.slo = slo.schedule();
            slo_explicit = true;
        }
        if let Some(inline) = &file.calibration_inline {
            calibration = inline.clone();
        } else if let Some(path) = &file.calibration {
            calibration = CalibrationFile::load(path)
                .with_context(|| format!("loading calibration {}", path.display()))?;
        }
        seed = file.seed.unwrap_or(seed);
        repeats = file.repeats.unwrap_or(repeats);
        if let Some(q) = &file.qps {
            qps = q.clone();
        }
        if let Some(s) = &file.slo_scale {
            slo_scale = s.clone();
        }
    }

    if let Some(path) = &overrides.trace {
        workload = WorkloadConfig::Trace {
            path: path.clone(),
            qps_per_gpu: workload.qps_per_gpu(),
        };
    }
    if let Some(q) = &overrides.qps {
        qps = q.clone();
        if let Some(&first) = q.first() {
            workload.set_qps(first);
        }
    }
    if let Some(s) = &overrides.slo_scale {
        slo_scale = s.clone();
    }
    if let Some(r) = overrides.repeats {
        repeats = r;
    }
    if let Some(s) = overrides.seed {
        seed = s;
    }
    if repeats == 0 {
        bail!("repeats must be at least 1");
    }
    if slo_scale.is_empty() {
        bail!("slo-scale list must not be empty");
    }
    sim.seed = seed;

    Ok(ResolvedConfig {
        sim,
        controller,
        workload,
        calibration_inline: calibration,
        seed,
        repeats,
        qps,
        slo_scale,
        slo_explicit,
    })
}
